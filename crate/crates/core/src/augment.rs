//! Dual-view graph augmentation: pool sampling, view construction, Gumbel
//! keep decisions, cross-view stability and interaction masking.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::distributions::Open01;
use rand::seq::index::sample;
use rand::Rng;

use crate::augmenter::{AugmentationPools, View};
use crate::autograd::Var;
use crate::encoder::{confidence_aggregate, gat_aggregate, triplet_confidence, IaIndex};
use crate::error::DataError;
use crate::kg::{IaTriplet, InteractionGraph, ItemId, TripartiteKg, UserId, Vocab};
use crate::params::ParamVars;

/// What the sampling ratios are relative to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioBase {
    /// `|G_IA|`.
    #[default]
    IaTriplets,
    /// `|G_IA| + |G_II| + |Y|`.
    AllTriplets,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampledPools {
    pub add_user: Vec<IaTriplet>,
    pub del_user_ia: Vec<IaTriplet>,
    pub del_user_ui: Vec<(UserId, ItemId)>,
    pub add_item: Vec<IaTriplet>,
    pub del_item: Vec<IaTriplet>,
    pub n_add: usize,
    pub n_del: usize,
}

fn take<T: Copy + Ord>(pool: &[T], n: usize, rng: &mut impl Rng) -> Vec<T> {
    let n = n.min(pool.len());
    let mut idx = sample(rng, pool.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|k| pool[k]).collect()
}

/// Draws `round(μ_a·base)` adds and `round(μ_d·base)` deletes from each pool,
/// uniformly without replacement. The user-view delete sample is drawn from the
/// union of its IA and UI parts.
pub fn sample_pools(
    pools: &AugmentationPools,
    kg: &TripartiteKg,
    mu_a: f64,
    mu_d: f64,
    base: RatioBase,
    rng: &mut impl Rng,
) -> SampledPools {
    let size = match base {
        RatioBase::IaTriplets => kg.ia().len(),
        RatioBase::AllTriplets => kg.ia().len() + kg.ii().len() + kg.interactions.len(),
    } as f64;
    let n_add = (mu_a * size).round() as usize;
    let n_del = (mu_d * size).round() as usize;
    if pools.is_empty() && (n_add > 0 || n_del > 0) {
        log::debug!("augmentation pools are empty; views equal the knowledge graph");
    }
    let keys =
        |m: &std::collections::BTreeMap<IaTriplet, usize>| m.keys().copied().collect::<Vec<_>>();
    let add_user = take(&keys(&pools.add_user), n_add, rng);
    let ia_del = keys(&pools.del_user_ia);
    let ui_del: Vec<(UserId, ItemId)> = pools.del_user_ui.keys().copied().collect();
    let n_user_del = n_del.min(ia_del.len() + ui_del.len());
    let mut idx = sample(rng, ia_del.len() + ui_del.len(), n_user_del).into_vec();
    idx.sort_unstable();
    let mut del_user_ia = Vec::new();
    let mut del_user_ui = Vec::new();
    for k in idx {
        if k < ia_del.len() {
            del_user_ia.push(ia_del[k]);
        } else {
            del_user_ui.push(ui_del[k - ia_del.len()]);
        }
    }
    let add_item = take(&keys(&pools.add_item), n_add, rng);
    let del_item = take(&keys(&pools.del_item), n_del, rng);
    SampledPools {
        add_user,
        del_user_ia,
        del_user_ui,
        add_item,
        del_item,
        n_add,
        n_del,
    }
}

/// IA triplets of one augmented view, sorted and unique.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewGraph {
    pub view: View,
    pub triplets: Vec<IaTriplet>,
}

impl ViewGraph {
    pub fn new(view: View, triplets: impl IntoIterator<Item = IaTriplet>) -> Self {
        let set: BTreeSet<IaTriplet> = triplets.into_iter().collect();
        ViewGraph {
            view,
            triplets: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// `G_U = G_IA ∪ M_add_U \ M_del_U(IA)` and `G_I = G_IA ∪ M_add_I \ M_del_I`.
pub fn build_view_graphs(kg: &TripartiteKg, sampled: &SampledPools) -> (ViewGraph, ViewGraph) {
    let build = |view, add: &[IaTriplet], del: &[IaTriplet]| {
        let mut set: BTreeSet<IaTriplet> = kg.ia().iter().copied().collect();
        set.extend(add.iter().copied());
        for t in del {
            set.remove(t);
        }
        ViewGraph::new(view, set)
    };
    (
        build(View::User, &sampled.add_user, &sampled.del_user_ia),
        build(View::Item, &sampled.add_item, &sampled.del_item),
    )
}

/// `P(t) = σ(φ·K)`.
pub fn keep_probability(phi: f64, k: f64) -> f64 {
    let z = phi * k;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `g1 − g0` for `n` triplets, with `g0, g1` independent Gumbel(0, 1).
pub fn draw_gumbel_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut gumbel = || {
        let u: f64 = rng.sample(Open01);
        -(-u.ln()).ln()
    };
    (0..n).map(|_| gumbel() - gumbel()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionMask {
    pub prob: Vec<f64>,
    pub soft: Vec<f64>,
    pub hard: Vec<bool>,
}

impl DecisionMask {
    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }

    pub fn kept(&self) -> Vec<usize> {
        self.hard
            .iter()
            .enumerate()
            .filter(|(_, &h)| h)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Binary-concrete relaxation of keep decisions with the given noise:
/// `soft = σ((logit P + g1 − g0)/τ_g)`, `hard = soft > 0.5`.
pub fn decisions_with_noise(prob: &[f64], noise: &[f64], tau_g: f64) -> DecisionMask {
    assert_eq!(prob.len(), noise.len(), "one noise sample per triplet");
    let soft: Vec<f64> = prob
        .iter()
        .zip(noise)
        .map(|(&p, &g)| {
            let p = p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
            keep_probability((p.ln() - (1.0 - p).ln() + g) / tau_g, 1.0)
        })
        .collect();
    let hard = soft.iter().map(|&s| s > 0.5).collect();
    DecisionMask {
        prob: prob.to_vec(),
        soft,
        hard,
    }
}

pub fn gumbel_decisions(prob: &[f64], tau_g: f64, rng: &mut impl Rng) -> DecisionMask {
    let noise = draw_gumbel_noise(prob.len(), rng);
    decisions_with_noise(prob, &noise, tau_g)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("decision mask covers {found} triplets, view has {expected}")]
pub struct MaskMismatch {
    pub expected: usize,
    pub found: usize,
}

/// `ψ(G) = G ⊙ D`: the triplets whose hard decision is keep.
pub fn apply_decisions(view: &ViewGraph, mask: &DecisionMask) -> Result<ViewGraph, MaskMismatch> {
    if view.len() != mask.len() {
        return Err(MaskMismatch {
            expected: view.len(),
            found: mask.len(),
        });
    }
    let kept = view
        .triplets
        .iter()
        .zip(&mask.hard)
        .filter(|(_, &h)| h)
        .map(|(t, _)| *t);
    Ok(ViewGraph {
        view: view.view,
        triplets: kept.collect(),
    })
}

/// How keep decisions enter confidence aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionMode {
    /// Dropped triplets are removed; kept ones carry the straight-through factor
    /// (forward value exactly 1, gradient of the soft decision).
    StraightThrough,
    /// Same kept set, weights multiplied by the soft decision. Used for
    /// finite-difference checks, where the forward must be smooth.
    Soft,
}

/// Frozen randomness for one view in one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewNoise {
    pub gumbel: Vec<f64>,
}

pub struct KnowledgeView<'t> {
    /// `x_i''` after renewal, `|I| × d`.
    pub items: Var<'t>,
    /// `φ(t)` per view triplet, `T × 1`.
    pub phi: Var<'t>,
    pub mask: DecisionMask,
}

/// Encodes one view: attention over the view graph, confidence per triplet,
/// Gumbel keep decisions from `P = σ(Kφ)`, then confidence aggregation over the
/// kept triplets.
pub fn encode_knowledge_view<'t>(
    p: &ParamVars<'t>,
    view: &ViewGraph,
    noise: &ViewNoise,
    k: f64,
    tau_g: f64,
    mode: DecisionMode,
) -> KnowledgeView<'t> {
    let index = IaIndex::new(&view.triplets);
    let prime = gat_aggregate(p, &index).items;
    let phi = triplet_confidence(p, prime, &index).phi;
    let phi_v = phi.value();
    let prob: Vec<f64> = phi_v.iter().map(|&f| keep_probability(f, k)).collect();
    let mask = decisions_with_noise(&prob, &noise.gumbel, tau_g);
    let g = Array2::from_shape_vec((noise.gumbel.len(), 1), noise.gumbel.clone()).expect("column");
    let soft = phi.scale(k).add_const(&g).scale(1.0 / tau_g).sigmoid();
    let kept = mask.kept();
    let kept_rc = std::rc::Rc::new(kept.clone());
    let factor = match mode {
        DecisionMode::StraightThrough => {
            let hard = Array2::from_shape_fn((kept.len(), 1), |_| 1.0);
            soft.gather(kept_rc.clone()).straight_through(hard)
        }
        DecisionMode::Soft => soft.gather(kept_rc.clone()),
    };
    let sub = index.select(&kept);
    let items = confidence_aggregate(p, prime, &sub, phi.gather(kept_rc), Some(factor)).items;
    KnowledgeView { items, phi, mask }
}

/// Cosine similarity per row; rows with zero norm give 0.
pub fn cross_view_stability(user_view: &Array2<f64>, item_view: &Array2<f64>) -> Vec<f64> {
    assert_eq!(
        user_view.dim(),
        item_view.dim(),
        "views must have the same shape"
    );
    let mut zero = 0usize;
    let s = user_view
        .outer_iter()
        .zip(item_view.outer_iter())
        .map(|(a, b)| {
            let na = a.dot(&a).sqrt();
            let nb = b.dot(&b).sqrt();
            if na == 0.0 || nb == 0.0 {
                zero += 1;
                0.0
            } else {
                (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
            }
        })
        .collect();
    if zero > 0 {
        log::debug!("{zero} items have a zero-norm view embedding; stability set to 0");
    }
    s
}

/// `p_i = ((1 − p_drop)/mean(e)) · (e_i − min e)/(max e − min e)` with
/// `e = exp(s)`, clamped to `[0, 1]`. Constant `s` gives `1 − p_drop`.
pub fn item_keep_probability(s: &[f64], p_drop: f64) -> Vec<f64> {
    let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
    let (lo, hi) = e
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if e.is_empty() || hi <= lo {
        return vec![1.0 - p_drop; e.len()];
    }
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    e.iter()
        .map(|&v| ((1.0 - p_drop) / mean * (v - lo) / (hi - lo)).clamp(0.0, 1.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedInteractions {
    /// `ζ(Y)_U`.
    pub user_view: InteractionGraph,
    /// `ζ(Y)_I`.
    pub item_view: InteractionGraph,
    pub mask_user: Vec<bool>,
    pub mask_item: Vec<bool>,
}

/// Draws item masks `M_U, M_I ~ Bernoulli(p)` and applies them to `train`;
/// the user view also loses the interactions in `y_del`.
pub fn mask_interactions(
    train: &InteractionGraph,
    p: &[f64],
    y_del: &[(UserId, ItemId)],
    rng: &mut impl Rng,
) -> MaskedInteractions {
    assert_eq!(p.len(), train.n_items(), "one keep probability per item");
    let mut draw = || {
        p.iter()
            .map(|&pi| rng.gen::<f64>() < pi)
            .collect::<Vec<bool>>()
    };
    let mask_user = draw();
    let mask_item = draw();
    let del: BTreeSet<(UserId, ItemId)> = y_del.iter().copied().collect();
    let pairs = train.pairs();
    let user_view = InteractionGraph::from_pairs(
        train.n_users(),
        train.n_items(),
        pairs
            .iter()
            .copied()
            .filter(|&(u, i)| mask_user[i.index()] && !del.contains(&(u, i))),
    );
    let item_view = InteractionGraph::from_pairs(
        train.n_users(),
        train.n_items(),
        pairs.iter().copied().filter(|&(_, i)| mask_item[i.index()]),
    );
    MaskedInteractions {
        user_view,
        item_view,
        mask_user,
        mask_item,
    }
}

/// Writes both view graphs, their decisions and the interaction masks as TSV.
pub fn dump_views(
    dir: &Path,
    vocab: &Vocab,
    views: [(&ViewGraph, &DecisionMask); 2],
    masked: &MaskedInteractions,
) -> Result<(), DataError> {
    for (view, mask) in views {
        let name = match view.view {
            View::User => "view_user.tsv",
            View::Item => "view_item.tsv",
        };
        let mut s = String::from("item\trelation\tattribute\tkeep_prob\tsoft\tkept\n");
        for (k, t) in view.triplets.iter().enumerate() {
            let (p, soft, hard) = mask
                .prob
                .get(k)
                .map(|&p| (p, mask.soft[k], mask.hard[k] as u8))
                .unwrap_or((f64::NAN, f64::NAN, 1));
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{p:.6}\t{soft:.6}\t{hard}",
                vocab.item_name(t.item),
                vocab.relation_name(t.relation),
                vocab.attribute_name(t.attr)
            );
        }
        crate::io::write_atomic(&dir.join(name), s.as_bytes())?;
    }
    let mut s = String::from("item\tmask_user\tmask_item\n");
    for (k, (mu, mi)) in masked.mask_user.iter().zip(&masked.mask_item).enumerate() {
        let _ = writeln!(
            s,
            "{}\t{}\t{}",
            vocab.item_name(ItemId::from_index(k)),
            *mu as u8,
            *mi as u8
        );
    }
    crate::io::write_atomic(&dir.join("item_masks.tsv"), s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::kg::{AttrId, RelId, RelationKind};
    use crate::params::{ModelDims, ModelParams};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(i: u32, r: u32, a: u32) -> IaTriplet {
        IaTriplet::new(ItemId(i), RelId(r), AttrId(a))
    }

    fn kg_with(n_ia: usize) -> TripartiteKg {
        let mut v = Vocab::new();
        for k in 0..n_ia {
            v.item(&format!("i{k}"));
        }
        v.user("u0");
        v.relation("has_a", RelationKind::ItemAttribute).unwrap();
        v.attribute("a0");
        let ia = (0..n_ia as u32).map(|k| t(k, 1, 0)).collect();
        let g = InteractionGraph::from_pairs(1, n_ia, [(UserId(0), ItemId(0))]);
        TripartiteKg::new(v, g, ia, vec![])
    }

    #[test]
    fn sample_sizes_follow_ratios() {
        let kg = kg_with(100);
        let mut pools = AugmentationPools::default();
        for k in 0..50 {
            pools.del_item.insert(t(k, 1, 0), 0);
            pools.add_item.insert(t(k, 1, 1), 0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_pools(&pools, &kg, 0.6, 0.08, RatioBase::IaTriplets, &mut rng);
        assert_eq!(s.n_del, 8);
        assert_eq!(s.del_item.len(), 8);
        assert_eq!(s.add_item.len(), 50);
        assert!(s.add_user.is_empty() && s.del_user_ia.is_empty());
        assert!(s.del_item.iter().all(|x| pools.del_item.contains_key(x)));

        let none = sample_pools(&pools, &kg, 0.0, 0.0, RatioBase::IaTriplets, &mut rng);
        assert!(none.add_item.is_empty() && none.del_item.is_empty());
    }

    #[test]
    fn views_follow_set_algebra() {
        let kg = kg_with(4);
        let empty = SampledPools::default();
        let (u, i) = build_view_graphs(&kg, &empty);
        assert_eq!(u.triplets, kg.ia());
        assert_eq!(i.triplets, kg.ia());

        let s = SampledPools {
            add_user: vec![t(0, 1, 5)],
            del_user_ia: vec![t(1, 1, 0)],
            ..Default::default()
        };
        let (u, i) = build_view_graphs(&kg, &s);
        assert_eq!(u.len(), kg.ia().len());
        assert!(u.triplets.contains(&t(0, 1, 5)) && !u.triplets.contains(&t(1, 1, 0)));
        assert_eq!(i.triplets, kg.ia());
    }

    #[test]
    fn keep_probability_values() {
        assert_eq!(keep_probability(0.0, 5.0), 0.5);
        assert_eq!(keep_probability(1e6, 5.0), 1.0);
        assert_eq!(keep_probability(-1e6, 5.0), 0.0);
        assert!(keep_probability(0.1, 5.0) < keep_probability(0.2, 5.0));
    }

    #[test]
    fn gumbel_keep_frequency_matches_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for p in [0.5, 0.2, 0.9] {
            let m = gumbel_decisions(&vec![p; 10_000], 0.9, &mut rng);
            let freq = m.hard.iter().filter(|&&h| h).count() as f64 / 10_000.0;
            assert!((freq - p).abs() < 0.02, "p={p} freq={freq}");
        }
        let m = gumbel_decisions(&[1.0 - 1e-12; 1000], 0.9, &mut rng);
        assert!(m.hard.iter().all(|&h| h));
    }

    #[test]
    fn mask_must_cover_view() {
        let view = ViewGraph::new(View::User, [t(0, 1, 0), t(1, 1, 0)]);
        let m = decisions_with_noise(&[0.5], &[0.0], 1.0);
        assert_eq!(
            apply_decisions(&view, &m),
            Err(MaskMismatch {
                expected: 2,
                found: 1
            })
        );
        let m = DecisionMask {
            prob: vec![0.5; 2],
            soft: vec![0.9, 0.1],
            hard: vec![true, false],
        };
        assert_eq!(
            apply_decisions(&view, &m).unwrap().triplets,
            vec![t(0, 1, 0)]
        );
    }

    fn small_params() -> (ModelParams, ViewGraph) {
        let dims = ModelDims {
            n_users: 2,
            n_items: 5,
            n_attributes: 6,
            n_relations: 3,
            dim: 8,
            n_experts: 2,
        };
        let params = ModelParams::init(dims, 3);
        let view = ViewGraph::new(
            View::Item,
            [
                t(0, 1, 0),
                t(0, 2, 1),
                t(1, 1, 2),
                t(2, 2, 3),
                t(2, 1, 4),
                t(2, 2, 5),
                t(3, 1, 1),
            ],
        );
        (params, view)
    }

    #[test]
    fn dropped_triplets_are_excluded_bit_for_bit() {
        let (params, view) = small_params();
        let noise = ViewNoise {
            gumbel: vec![5.0, -9.0, 5.0, -9.0, 5.0, 5.0, -9.0],
        };
        let tape = Tape::new();
        let p = params.vars(&tape);
        let kv = encode_knowledge_view(&p, &view, &noise, 5.0, 0.9, DecisionMode::StraightThrough);
        let kept = kv.mask.kept();
        assert!(kept.len() < view.len() && !kept.is_empty());

        // same x_i' and φ, aggregation over the physically reduced triplet list
        let index = IaIndex::new(&view.triplets);
        let prime = gat_aggregate(&p, &index).items;
        let phi = triplet_confidence(&p, prime, &index).phi;
        let reduced = index.select(&kept);
        let expected = confidence_aggregate(
            &p,
            prime,
            &reduced,
            phi.gather(std::rc::Rc::new(kept.clone())),
            None,
        );
        assert_eq!(*kv.items.value(), *expected.items.value());

        // item 3 lost its only neighbor and passes through
        let prime_v = prime.value();
        assert_eq!(kv.items.value().row(3), prime_v.row(3));
    }

    #[test]
    fn all_kept_equals_unmasked() {
        let (params, view) = small_params();
        let noise = ViewNoise {
            gumbel: vec![50.0; view.len()],
        };
        let tape = Tape::new();
        let p = params.vars(&tape);
        let kv = encode_knowledge_view(&p, &view, &noise, 5.0, 0.9, DecisionMode::StraightThrough);
        let index = IaIndex::new(&view.triplets);
        let prime = gat_aggregate(&p, &index).items;
        let phi = triplet_confidence(&p, prime, &index).phi;
        let full = confidence_aggregate(&p, prime, &index, phi, None);
        assert_eq!(*kv.items.value(), *full.items.value());
    }

    #[test]
    fn straight_through_passes_gradient_to_phi() {
        let (params, view) = small_params();
        let noise = ViewNoise {
            gumbel: vec![0.3, -0.2, 0.1, 0.4, -0.1, 0.2, 0.0],
        };
        let tape = Tape::new();
        let p = params.vars(&tape);
        let kv = encode_knowledge_view(&p, &view, &noise, 5.0, 0.9, DecisionMode::StraightThrough);
        let loss = kv.items.sum_squares();
        let g = tape.backward(loss);
        assert!(g.wrt(p.relation).iter().any(|v| v.abs() > 1e-8));
        assert!(g.wrt(p.expert_w).iter().any(|v| v.abs() > 1e-8));
    }

    #[test]
    fn soft_mode_gradient_matches_finite_differences() {
        let (params, view) = small_params();
        let noise = ViewNoise {
            gumbel: vec![0.3, -0.2, 0.1, 0.4, -0.1, 0.2, 0.0],
        };
        let loss_of = |params: &ModelParams| {
            let tape = Tape::new();
            let p = params.vars(&tape);
            encode_knowledge_view(&p, &view, &noise, 5.0, 0.9, DecisionMode::Soft)
                .items
                .sum_squares()
                .item()
        };
        let tape = Tape::new();
        let p = params.vars(&tape);
        let kv = encode_knowledge_view(&p, &view, &noise, 5.0, 0.9, DecisionMode::Soft);
        let grads = tape.backward(kv.items.sum_squares());
        let h = 1e-5;
        for (name, var) in p.all() {
            let analytic = grads.wrt(var);
            let shape = params.tensor(name).dim();
            for r in 0..shape.0.min(3) {
                for c in 0..shape.1.min(3) {
                    let mut plus = params.clone();
                    plus.tensor_mut(name)[[r, c]] += h;
                    let mut minus = params.clone();
                    minus.tensor_mut(name)[[r, c]] -= h;
                    let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                    let a = analytic[[r, c]];
                    let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    assert!(err < 1e-4, "{name}[{r},{c}] analytic {a} numeric {numeric}");
                }
            }
        }
    }

    #[test]
    fn stability_cases() {
        let a = ndarray::array![[1.0, 2.0], [1.0, 0.0], [0.0, 0.0]];
        let b = ndarray::array![[2.0, 4.0], [0.0, 3.0], [1.0, 1.0]];
        let same = cross_view_stability(&a, &a);
        assert!(same[..2].iter().all(|v| (v - 1.0).abs() < 1e-12));
        let s = cross_view_stability(&a, &b);
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
        assert_eq!(s[2], 0.0);
        assert!((cross_view_stability(&a, &(-&a))[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn keep_probability_degenerate_and_minimum() {
        assert_eq!(item_keep_probability(&[0.3; 4], 0.01), vec![0.99; 4]);
        let p = item_keep_probability(&[-0.5, 0.2, 0.9], 0.01);
        assert_eq!(p[0], 0.0);
    }

    #[test]
    fn masking_cases() {
        let g = InteractionGraph::from_pairs(
            2,
            3,
            [
                (UserId(0), ItemId(0)),
                (UserId(0), ItemId(1)),
                (UserId(1), ItemId(2)),
            ],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = mask_interactions(&g, &[1.0; 3], &[], &mut rng);
        assert_eq!(m.user_view, g);
        assert_eq!(m.item_view, g);
        let m = mask_interactions(&g, &[1.0, 1.0, 0.0], &[(UserId(0), ItemId(1))], &mut rng);
        assert!(!m.user_view.contains(UserId(0), ItemId(1)));
        assert!(m.item_view.contains(UserId(0), ItemId(1)));
        assert!(
            !m.user_view.contains(UserId(1), ItemId(2))
                && !m.item_view.contains(UserId(1), ItemId(2))
        );
    }

    proptest! {
        #[test]
        fn stability_and_keep_bounds(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 8), 2..12),
                                     p_drop in 0.0f64..0.99) {
            let n = rows.len() / 2;
            prop_assume!(n >= 1);
            let a = Array2::from_shape_fn((n, 4), |(r, c)| rows[r][c]);
            let b = Array2::from_shape_fn((n, 4), |(r, c)| rows[n + r][c + 4]);
            let s = cross_view_stability(&a, &b);
            prop_assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
            let p = item_keep_probability(&s, p_drop);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            for i in 0..n {
                for j in 0..n {
                    if s[i] < s[j] {
                        prop_assert!(p[i] <= p[j]);
                    }
                }
            }
        }

        #[test]
        fn user_view_never_contains_deleted(seed in 0u64..1000, probs in prop::collection::vec(0.0f64..=1.0, 6)) {
            let mut pairs = Vec::new();
            for u in 0..4u32 {
                for i in 0..6u32 {
                    if (u + i) % 2 == 0 { pairs.push((UserId(u), ItemId(i))); }
                }
            }
            let g = InteractionGraph::from_pairs(4, 6, pairs.clone());
            let del: Vec<_> = pairs.iter().copied().step_by(3).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = mask_interactions(&g, &probs, &del, &mut rng);
            for &(u, i) in m.user_view.pairs() {
                prop_assert!(g.contains(u, i) && !del.contains(&(u, i)) && m.mask_user[i.index()]);
            }
            for &(u, i) in m.item_view.pairs() {
                prop_assert!(g.contains(u, i) && m.mask_item[i.index()]);
            }
            for &(u, i) in g.pairs() {
                prop_assert_eq!(m.item_view.contains(u, i), m.mask_item[i.index()]);
            }
        }
    }
}
