//! Losses, negative sampling, the Adam update and the epoch loop.
//!
//! One epoch: sample pools and build both view graphs, freeze Gumbel noise,
//! compute cross-view stability and mask the interaction graph, then run BPR +
//! contrastive steps over shuffled train batches. Every step re-encodes the
//! knowledge graph with the current parameters.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    build_view_graphs, cross_view_stability, draw_gumbel_noise, dump_views, encode_knowledge_view,
    item_keep_probability, mask_interactions, sample_pools, DecisionMask, DecisionMode,
    MaskedInteractions, RatioBase, SampledPools, ViewGraph, ViewNoise,
};
use crate::augmenter::AugmentationPools;
use crate::autograd::{Tape, Var};
use crate::encoder::{confidence_aggregate, gat_aggregate, triplet_confidence, IaIndex};
use crate::error::TrainError;
use crate::eval::{evaluate_split, EvalSplit};
use crate::kg::{DatasetSplit, IaTriplet, InteractionGraph, ItemId, TripartiteKg, UserId};
use crate::params::{ModelDims, ModelParams, ParamVars, TENSOR_NAMES};
use crate::propagation::{final_embeddings, propagate, propagate_values, Adjacency};

/// Which knowledge-encoder components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeMode {
    /// Attention, confidence-weighted aggregation and Gumbel keep decisions.
    #[default]
    Full,
    /// Attention, then uniform aggregation over all view triplets.
    NoConfidence,
    /// Item embeddings are the raw item table.
    Off,
}

/// Item inputs of the BPR propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BprSource {
    #[default]
    MeanViews,
    UserView,
    ItemView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dim: usize,
    pub layers: usize,
    pub n_experts: usize,
    /// `K` in `P(t) = σ(Kφ)`.
    pub confidence_scale: f64,
    pub tau_gumbel: f64,
    pub tau: f64,
    pub mu_add: f64,
    pub mu_del: f64,
    pub ratio_base: RatioBase,
    pub p_drop: f64,
    pub lambda_con: f64,
    pub lambda_reg: f64,
    pub batch_size: usize,
    /// Cap on users and on items per contrastive batch.
    pub con_batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub eval_k: usize,
    pub include_layer0: bool,
    pub bpr_source: BprSource,
    pub knowledge: KnowledgeMode,
    /// Keep the positive pair in the contrastive denominator.
    pub con_include_positive: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            dim: 64,
            layers: 3,
            n_experts: 8,
            confidence_scale: 5.0,
            tau_gumbel: 0.9,
            tau: 0.2,
            mu_add: 0.6,
            mu_del: 0.08,
            ratio_base: RatioBase::IaTriplets,
            p_drop: 0.01,
            lambda_con: 1e-3,
            lambda_reg: 1e-4,
            batch_size: 2048,
            con_batch_size: 2048,
            epochs: 50,
            seed: 2024,
            patience: 10,
            eval_k: 10,
            include_layer0: false,
            bpr_source: BprSource::MeanViews,
            knowledge: KnowledgeMode::Full,
            con_include_positive: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_owned()));
        let positive = [
            ("learning_rate", self.learning_rate),
            ("confidence_scale", self.confidence_scale),
            ("tau_gumbel", self.tau_gumbel),
            ("tau", self.tau),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return err(&format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("dim", self.dim),
            ("layers", self.layers),
            ("n_experts", self.n_experts),
        ] {
            if v == 0 {
                return err(&format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("con_batch_size", self.con_batch_size),
            ("eval_k", self.eval_k),
        ] {
            if v == 0 {
                return err(&format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [("mu_add", self.mu_add), ("mu_del", self.mu_del)] {
            if !(0.0..=1.0).contains(&v) {
                return err(&format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return err(&format!("p_drop must be in [0, 1), got {}", self.p_drop));
        }
        for (name, v) in [
            ("lambda_con", self.lambda_con),
            ("lambda_reg", self.lambda_reg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(&format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn dims(&self, kg: &TripartiteKg) -> ModelDims {
        ModelDims {
            n_users: kg.vocab.n_users(),
            n_items: kg.vocab.n_items(),
            n_attributes: kg.vocab.n_attributes(),
            n_relations: kg.vocab.n_relations(),
            dim: self.dim,
            n_experts: self.n_experts,
        }
    }

    /// Parameter tensors that take part in the forward pass.
    pub fn active_tensors(&self) -> &'static [&'static str] {
        match self.knowledge {
            KnowledgeMode::Full => &TENSOR_NAMES,
            KnowledgeMode::NoConfidence => &["user", "item", "attr", "att_w", "att_a"],
            KnowledgeMode::Off => &["user", "item"],
        }
    }
}

const NORM_EPS: f64 = 1e-12;

/// In-batch contrastive loss between two views of the same `n` nodes.
///
/// Row `n` of `a` is paired with row `n` of `b`; the other rows of the
/// opposite view are negatives. Cosine similarities are divided by `tau`.
/// Averaged over nodes and over both anchor directions.
pub fn contrastive_loss<'t>(
    a: Var<'t>,
    b: Var<'t>,
    tau: f64,
    include_positive: bool,
) -> Result<Var<'t>, TrainError> {
    let n = a.shape().0;
    if n < 2 {
        return Err(TrainError::Config(
            "contrastive loss needs at least two nodes".into(),
        ));
    }
    let sim = a
        .row_normalize(NORM_EPS)
        .matmul(b.row_normalize(NORM_EPS).t())
        .scale(1.0 / tau);
    let pos = sim.diag();
    let denom = if include_positive {
        sim
    } else {
        sim.add_const(&Array2::from_shape_fn((n, n), |(r, c)| {
            if r == c {
                -1e300
            } else {
                0.0
            }
        }))
    };
    let forward = denom.logsumexp_rows().sub(pos).mean();
    let backward = denom.t().logsumexp_rows().sub(pos).mean();
    Ok(forward.add(backward).scale(0.5))
}

/// Mean of `−log σ(ŷ_ui − ŷ_uj)`.
pub fn bpr_loss<'t>(pos_scores: Var<'t>, neg_scores: Var<'t>) -> Var<'t> {
    pos_scores.sub(neg_scores).log_sigmoid().mean().scale(-1.0)
}

/// `L_bpr + λ_c·L_con + λ_θ·‖Θ‖²`.
pub fn joint_loss<'t>(
    bpr: Var<'t>,
    con: Option<Var<'t>>,
    reg: Var<'t>,
    lambda_con: f64,
    lambda_reg: f64,
) -> Var<'t> {
    let mut out = bpr.add(reg.scale(lambda_reg));
    if let Some(c) = con {
        out = out.add(c.scale(lambda_con));
    }
    out
}

/// Uniform rejection sampling of one item per user outside `full`.
pub fn sample_negatives(
    full: &InteractionGraph,
    users: &[UserId],
    rng: &mut impl Rng,
) -> Result<Vec<ItemId>, TrainError> {
    let n = full.n_items();
    users
        .iter()
        .map(|&u| {
            if full.items_of(u).len() >= n {
                return Err(TrainError::NoNegative {
                    user: format!("#{}", u.index()),
                });
            }
            loop {
                let j = ItemId::from_index(rng.gen_range(0..n));
                if !full.contains(u, j) {
                    return Ok(j);
                }
            }
        })
        .collect()
}

/// `(u, i, j)` triples of one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BprBatch {
    pub users: Vec<UserId>,
    pub pos: Vec<ItemId>,
    pub neg: Vec<ItemId>,
}

/// Shuffles the train interactions and draws a negative for each.
pub fn epoch_batches(
    train: &InteractionGraph,
    full: &InteractionGraph,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<BprBatch>, TrainError> {
    let mut pairs = train.pairs().to_vec();
    pairs.shuffle(rng);
    pairs
        .chunks(batch_size)
        .map(|chunk| {
            let users: Vec<UserId> = chunk.iter().map(|p| p.0).collect();
            let pos = chunk.iter().map(|p| p.1).collect();
            let neg = sample_negatives(full, &users, rng)?;
            Ok(BprBatch { users, pos, neg })
        })
        .collect()
}

/// Adam with bias correction; tensors without a gradient are left untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .tensors()
            .iter()
            .map(|(_, a)| Array2::zeros(a.dim()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Array2<f64>>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (_, theta)) in params.tensors_mut().into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            ndarray::Zip::from(theta)
                .and(&mut self.m[k])
                .and(&mut self.v[k])
                .and(g)
                .for_each(|x, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Per-epoch augmentation state: fixed for every step of the epoch.
pub struct EpochViews {
    pub sampled: SampledPools,
    pub user_view: ViewGraph,
    pub item_view: ViewGraph,
    pub user_noise: ViewNoise,
    pub item_noise: ViewNoise,
    /// Keep decisions at the start of the epoch, for inspection.
    pub user_mask: Option<DecisionMask>,
    pub item_mask: Option<DecisionMask>,
    pub stability: Vec<f64>,
    pub keep_prob: Vec<f64>,
    pub masked: MaskedInteractions,
    pub user_adj: Adjacency,
    pub item_adj: Adjacency,
}

fn knowledge_items<'t>(
    tape: &'t Tape,
    p: &ParamVars<'t>,
    view: &ViewGraph,
    noise: &ViewNoise,
    cfg: &TrainConfig,
    mode: DecisionMode,
) -> (Var<'t>, Option<DecisionMask>) {
    match cfg.knowledge {
        KnowledgeMode::Full => {
            let kv =
                encode_knowledge_view(p, view, noise, cfg.confidence_scale, cfg.tau_gumbel, mode);
            (kv.items, Some(kv.mask))
        }
        KnowledgeMode::NoConfidence => {
            let index = IaIndex::new(&view.triplets);
            let prime = gat_aggregate(p, &index).items;
            let flat = tape.leaf(Array2::zeros((index.len(), 1)));
            (
                confidence_aggregate(p, prime, &index, flat, None).items,
                None,
            )
        }
        KnowledgeMode::Off => (p.item, None),
    }
}

/// Samples pools, builds and encodes both views, and masks the train graph.
pub fn prepare_epoch(
    params: &ModelParams,
    kg: &TripartiteKg,
    train: &InteractionGraph,
    pools: &AugmentationPools,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> EpochViews {
    let sampled = sample_pools(pools, kg, cfg.mu_add, cfg.mu_del, cfg.ratio_base, rng);
    let (user_view, item_view) = build_view_graphs(kg, &sampled);
    let user_noise = ViewNoise {
        gumbel: draw_gumbel_noise(user_view.len(), rng),
    };
    let item_noise = ViewNoise {
        gumbel: draw_gumbel_noise(item_view.len(), rng),
    };
    let tape = Tape::new();
    let p = params.vars(&tape);
    let st = DecisionMode::StraightThrough;
    let (xu, user_mask) = knowledge_items(&tape, &p, &user_view, &user_noise, cfg, st);
    let (xi, item_mask) = knowledge_items(&tape, &p, &item_view, &item_noise, cfg, st);
    let stability = cross_view_stability(&xu.value(), &xi.value());
    let keep_prob = item_keep_probability(&stability, cfg.p_drop);
    let masked = mask_interactions(train, &keep_prob, &sampled.del_user_ui, rng);
    let user_adj = Adjacency::new(&masked.user_view);
    let item_adj = Adjacency::new(&masked.item_view);
    EpochViews {
        sampled,
        user_view,
        item_view,
        user_noise,
        item_noise,
        user_mask,
        item_mask,
        stability,
        keep_prob,
        masked,
        user_adj,
        item_adj,
    }
}

pub struct LossParts<'t> {
    pub bpr: Var<'t>,
    pub con: Option<Var<'t>>,
    pub reg: Var<'t>,
    pub joint: Var<'t>,
}

fn unique_capped(ids: impl Iterator<Item = usize>, cap: usize) -> Rc<Vec<usize>> {
    let set: std::collections::BTreeSet<usize> = ids.collect();
    Rc::new(set.into_iter().take(cap).collect())
}

/// Joint loss of one batch under fixed epoch views.
pub fn forward_loss<'t>(
    tape: &'t Tape,
    p: &ParamVars<'t>,
    train_adj: &Adjacency,
    epoch: &EpochViews,
    batch: &BprBatch,
    cfg: &TrainConfig,
    mode: DecisionMode,
) -> Result<LossParts<'t>, TrainError> {
    let (xu, _) = knowledge_items(tape, p, &epoch.user_view, &epoch.user_noise, cfg, mode);
    let (xi, _) = knowledge_items(tape, p, &epoch.item_view, &epoch.item_noise, cfg, mode);

    let con = if cfg.lambda_con > 0.0 {
        let (uu, iu) = final_embeddings(
            &propagate(&epoch.user_adj, p.user, xu, cfg.layers),
            cfg.include_layer0,
        );
        let (ui, ii) = final_embeddings(
            &propagate(&epoch.item_adj, p.user, xi, cfg.layers),
            cfg.include_layer0,
        );
        let users = unique_capped(batch.users.iter().map(|u| u.index()), cfg.con_batch_size);
        let items = unique_capped(
            batch.pos.iter().chain(&batch.neg).map(|i| i.index()),
            cfg.con_batch_size,
        );
        let mut terms = Vec::new();
        if users.len() >= 2 {
            terms.push(contrastive_loss(
                uu.gather(users.clone()),
                ui.gather(users),
                cfg.tau,
                cfg.con_include_positive,
            )?);
        }
        if items.len() >= 2 {
            terms.push(contrastive_loss(
                iu.gather(items.clone()),
                ii.gather(items),
                cfg.tau,
                cfg.con_include_positive,
            )?);
        }
        let n = terms.len();
        terms
            .into_iter()
            .reduce(|a, b| a.add(b))
            .map(|s| s.scale(1.0 / n as f64))
    } else {
        None
    };

    let items0 = match (cfg.knowledge, cfg.bpr_source) {
        (KnowledgeMode::Off, _) => p.item,
        (_, BprSource::MeanViews) => xu.add(xi).scale(0.5),
        (_, BprSource::UserView) => xu,
        (_, BprSource::ItemView) => xi,
    };
    let (u, i) = final_embeddings(
        &propagate(train_adj, p.user, items0, cfg.layers),
        cfg.include_layer0,
    );
    let idx = |v: &[ItemId]| Rc::new(v.iter().map(|x| x.index()).collect::<Vec<_>>());
    let ue = u.gather(Rc::new(batch.users.iter().map(|x| x.index()).collect()));
    let pos = ue.mul(i.gather(idx(&batch.pos))).row_sum();
    let neg = ue.mul(i.gather(idx(&batch.neg))).row_sum();
    let bpr = bpr_loss(pos, neg);

    let active = cfg.active_tensors();
    let reg = p
        .all()
        .into_iter()
        .filter(|(name, _)| active.contains(name))
        .map(|(_, v)| v.sum_squares())
        .reduce(|a, b| a.add(b))
        .expect("at least one active tensor");
    let joint = joint_loss(bpr, con, reg, cfg.lambda_con, cfg.lambda_reg);
    Ok(LossParts {
        bpr,
        con,
        reg,
        joint,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StepLoss {
    pub bpr: f64,
    pub con: f64,
    pub reg: f64,
    pub joint: f64,
}

/// Loss values and per-tensor gradients (in [`TENSOR_NAMES`] order; `None`
/// for tensors the loss does not depend on).
pub fn loss_and_gradients(
    params: &ModelParams,
    train_adj: &Adjacency,
    epoch: &EpochViews,
    batch: &BprBatch,
    cfg: &TrainConfig,
    mode: DecisionMode,
) -> Result<(StepLoss, Vec<Option<Array2<f64>>>), TrainError> {
    let tape = Tape::new();
    let p = params.vars(&tape);
    let parts = forward_loss(&tape, &p, train_adj, epoch, batch, cfg, mode)?;
    let loss = StepLoss {
        bpr: parts.bpr.item(),
        con: parts.con.map_or(0.0, |c| c.item()),
        reg: parts.reg.item(),
        joint: parts.joint.item(),
    };
    let grads = tape.backward(parts.joint);
    let out = p
        .all()
        .into_iter()
        .map(|(_, v)| grads.touched(v).then(|| grads.wrt(v)))
        .collect();
    Ok((loss, out))
}

/// Eval-time item inputs: no pool sampling or noise; triplets with `φ ≥ 0`
/// (keep probability at least one half) are aggregated.
pub fn inference_items(params: &ModelParams, ia: &[IaTriplet], cfg: &TrainConfig) -> Array2<f64> {
    let tape = Tape::new();
    let p = params.vars(&tape);
    let index = IaIndex::new(ia);
    let items = match cfg.knowledge {
        KnowledgeMode::Full => {
            let prime = gat_aggregate(&p, &index).items;
            let phi = triplet_confidence(&p, prime, &index).phi;
            let kept: Vec<usize> = phi
                .value()
                .iter()
                .enumerate()
                .filter(|(_, &f)| f >= 0.0)
                .map(|(k, _)| k)
                .collect();
            let sub = index.select(&kept);
            confidence_aggregate(&p, prime, &sub, phi.gather(Rc::new(kept)), None).items
        }
        KnowledgeMode::NoConfidence => {
            let prime = gat_aggregate(&p, &index).items;
            confidence_aggregate(
                &p,
                prime,
                &index,
                tape.leaf(Array2::zeros((index.len(), 1))),
                None,
            )
            .items
        }
        KnowledgeMode::Off => p.item,
    };
    items.value().as_ref().clone()
}

/// Final user and item embeddings used for ranking.
pub fn inference_embeddings(
    params: &ModelParams,
    ia: &[IaTriplet],
    train_adj: &Adjacency,
    cfg: &TrainConfig,
) -> (Array2<f64>, Array2<f64>) {
    let items = inference_items(params, ia, cfg);
    propagate_values(
        train_adj,
        &params.user,
        &items,
        cfg.layers,
        cfg.include_layer0,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub bpr: f64,
    pub con: f64,
    pub joint: f64,
    pub val_recall: Option<f64>,
    pub val_ndcg: Option<f64>,
    pub improved: bool,
}

/// CSV with one row per epoch.
pub fn metrics_csv(history: &[EpochMetrics], k: usize) -> String {
    let mut s = format!("epoch,bpr,con,joint,val_recall@{k},val_ndcg@{k}\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.epoch,
            m.bpr,
            m.con,
            m.joint,
            opt(m.val_recall),
            opt(m.val_ndcg)
        );
    }
    s
}

/// Owns parameters, optimizer state and the two RNG streams.
pub struct Trainer<'a> {
    kg: &'a TripartiteKg,
    split: &'a DatasetSplit,
    pools: &'a AugmentationPools,
    cfg: TrainConfig,
    params: ModelParams,
    adam: Adam,
    batch_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    train_adj: Adjacency,
    epoch: usize,
    step: usize,
    dump_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        kg: &'a TripartiteKg,
        split: &'a DatasetSplit,
        pools: &'a AugmentationPools,
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let params = ModelParams::init(cfg.dims(kg), cfg.seed);
        Self::with_params(kg, split, pools, cfg, params)
    }

    pub fn with_params(
        kg: &'a TripartiteKg,
        split: &'a DatasetSplit,
        pools: &'a AugmentationPools,
        cfg: TrainConfig,
        params: ModelParams,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if params.dims != cfg.dims(kg) {
            return Err(TrainError::Config(format!(
                "parameter dims {:?} do not match the dataset and config {:?}",
                params.dims,
                cfg.dims(kg)
            )));
        }
        Ok(Trainer {
            kg,
            split,
            pools,
            adam: Adam::new(&params, cfg.learning_rate),
            batch_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            aug_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)),
            train_adj: Adjacency::new(&split.train),
            params,
            cfg,
            epoch: 0,
            step: 0,
            dump_dir: None,
        })
    }

    /// Writes each epoch's views and masks under `dir/epoch_NNN`.
    pub fn dump_views_to(&mut self, dir: PathBuf) {
        self.dump_dir = Some(dir);
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn train_adjacency(&self) -> &Adjacency {
        &self.train_adj
    }

    /// Epoch views for the next epoch, consuming augmentation randomness.
    pub fn prepare_epoch(&mut self) -> EpochViews {
        prepare_epoch(
            &self.params,
            self.kg,
            &self.split.train,
            self.pools,
            &self.cfg,
            &mut self.aug_rng,
        )
    }

    /// Next epoch's BPR batches, consuming batch randomness.
    pub fn next_batches(&mut self) -> Result<Vec<BprBatch>, TrainError> {
        epoch_batches(
            &self.split.train,
            &self.kg.interactions,
            self.cfg.batch_size,
            &mut self.batch_rng,
        )
    }

    /// One optimizer step.
    pub fn step(&mut self, views: &EpochViews, batch: &BprBatch) -> Result<StepLoss, TrainError> {
        let (loss, grads) = loss_and_gradients(
            &self.params,
            &self.train_adj,
            views,
            batch,
            &self.cfg,
            DecisionMode::StraightThrough,
        )?;
        if ![loss.bpr, loss.con, loss.reg, loss.joint]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(TrainError::NonFinite {
                epoch: self.epoch,
                step: self.step,
                bpr: loss.bpr,
                con: loss.con,
                reg: loss.reg,
            });
        }
        self.adam.step(&mut self.params, &grads);
        self.step += 1;
        Ok(loss)
    }

    /// One pass over the train interactions. Validation metrics are filled in
    /// by [`train`].
    pub fn run_epoch(&mut self) -> Result<EpochMetrics, TrainError> {
        let views = self.prepare_epoch();
        if let Some(dir) = &self.dump_dir {
            let dir = dir.join(format!("epoch_{:03}", self.epoch));
            let empty = |n: usize| DecisionMask {
                prob: vec![],
                soft: vec![],
                hard: vec![true; n],
            };
            let um = views
                .user_mask
                .clone()
                .unwrap_or_else(|| empty(views.user_view.len()));
            let im = views
                .item_mask
                .clone()
                .unwrap_or_else(|| empty(views.item_view.len()));
            dump_views(
                &dir,
                &self.kg.vocab,
                [(&views.user_view, &um), (&views.item_view, &im)],
                &views.masked,
            )?;
        }
        let batches = self.next_batches()?;
        let mut sum = StepLoss::default();
        for b in &batches {
            let l = self.step(&views, b)?;
            sum.bpr += l.bpr;
            sum.con += l.con;
            sum.joint += l.joint;
        }
        let n = batches.len().max(1) as f64;
        let m = EpochMetrics {
            epoch: self.epoch,
            steps: batches.len(),
            bpr: sum.bpr / n,
            con: sum.con / n,
            joint: sum.joint / n,
            val_recall: None,
            val_ndcg: None,
            improved: false,
        };
        self.epoch += 1;
        Ok(m)
    }

    pub fn embeddings(&self) -> (Array2<f64>, Array2<f64>) {
        inference_embeddings(&self.params, self.kg.ia(), &self.train_adj, &self.cfg)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last epoch without validation data).
    pub params: ModelParams,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Trains for `cfg.epochs` epochs with early stopping on validation Recall@k.
/// `on_epoch` sees every epoch's metrics with the parameters after that epoch.
pub fn train(
    kg: &TripartiteKg,
    split: &DatasetSplit,
    pools: &AugmentationPools,
    cfg: TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &ModelParams) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(kg, split, pools, cfg)?;
    run(&mut trainer, &mut on_epoch)
}

/// The epoch loop over an existing trainer.
pub fn run(
    trainer: &mut Trainer<'_>,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &ModelParams) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    let cfg = trainer.cfg.clone();
    let has_val = !trainer.split.validation.is_empty();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since = 0usize;
    let mut stopped_early = false;
    for _ in 0..cfg.epochs {
        let mut m = trainer.run_epoch()?;
        if has_val {
            let (u, i) = trainer.embeddings();
            let r = evaluate_split(&u, &i, trainer.split, EvalSplit::Validation, cfg.eval_k);
            m.val_recall = Some(r.recall);
            m.val_ndcg = Some(r.ndcg);
            if best.as_ref().map_or(true, |b| r.recall > b.0) {
                best = Some((r.recall, m.epoch, trainer.params.clone()));
                since = 0;
                m.improved = true;
            } else {
                since += 1;
            }
        } else {
            m.improved = true;
        }
        log::info!(
            "epoch {:>3}  bpr {:.6}  con {:.6}  joint {:.6}  val recall {}",
            m.epoch,
            m.bpr,
            m.con,
            m.joint,
            m.val_recall
                .map(|r| format!("{r:.4}"))
                .unwrap_or_else(|| "-".into())
        );
        on_epoch(&m, &trainer.params)?;
        history.push(m);
        if has_val && cfg.patience > 0 && since >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (
            trainer.params.clone(),
            history.last().map_or(0, |m| m.epoch),
        ),
    };
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::split_interactions;
    use crate::synthetic::{generate, SyntheticSpec};
    use ndarray::array;

    fn leaf_loss(a: Array2<f64>, b: Array2<f64>, tau: f64, incl: bool) -> f64 {
        let tape = Tape::new();
        contrastive_loss(tape.leaf(a), tape.leaf(b), tau, incl)
            .unwrap()
            .item()
    }

    #[test]
    fn contrastive_two_node_values() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        // positives at cosine 1, the single negative at cosine 0
        assert!((leaf_loss(e.clone(), e.clone(), 0.2, false) + 5.0).abs() < 1e-12);
        let with_pos = leaf_loss(e.clone(), e, 0.2, true);
        assert!((with_pos - (1.0 + (-5.0f64).exp()).ln()).abs() < 1e-12);
        assert!((with_pos - 0.0067).abs() < 1e-4);
    }

    #[test]
    fn contrastive_rejects_single_node() {
        let tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0]]);
        assert!(contrastive_loss(a, a, 0.2, false).is_err());
    }

    #[test]
    fn aligned_views_beat_shuffled() {
        let e = Array2::from_shape_fn((4, 4), |(r, c)| if r == c { 1.0 } else { 0.0 });
        let shuffled = e.select(ndarray::Axis(0), &[1, 2, 3, 0]);
        for incl in [false, true] {
            assert!(
                leaf_loss(e.clone(), e.clone(), 0.2, incl)
                    < leaf_loss(e.clone(), shuffled.clone(), 0.2, incl)
            );
        }
    }

    #[test]
    fn contrastive_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((6, 5), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((6, 5), |_| rng.gen_range(-1.0..1.0));
        let perm = [3, 0, 5, 1, 4, 2];
        let pa = a.select(ndarray::Axis(0), &perm);
        let pb = b.select(ndarray::Axis(0), &perm);
        for incl in [false, true] {
            let d = leaf_loss(a.clone(), b.clone(), 0.2, incl)
                - leaf_loss(pa.clone(), pb.clone(), 0.2, incl);
            assert!(d.abs() < 1e-10);
        }
    }

    #[test]
    fn bpr_values() {
        let tape = Tape::new();
        let s = tape.leaf(array![[0.3], [1.2]]);
        assert!((bpr_loss(s, s).item() - 2f64.ln()).abs() < 1e-12);
        let big = bpr_loss(tape.leaf(array![[800.0]]), tape.leaf(array![[0.0]])).item();
        assert!(big.abs() < 1e-300);
        let bad = bpr_loss(tape.leaf(array![[0.0]]), tape.leaf(array![[800.0]])).item();
        assert!((bad - 800.0).abs() < 1e-9);
    }

    #[test]
    fn joint_loss_reduces_to_bpr() {
        let tape = Tape::new();
        let bpr = tape.scalar(0.7);
        let out = joint_loss(bpr, Some(tape.scalar(3.0)), tape.scalar(9.0), 0.0, 0.0).item();
        assert_eq!(out, 0.7);
        let zeros = tape.leaf(Array2::zeros((3, 2)));
        assert_eq!(zeros.sum_squares().item(), 0.0);
    }

    #[test]
    fn negatives_avoid_interactions() {
        let g = InteractionGraph::from_pairs(
            2,
            4,
            [
                (UserId(0), ItemId(0)),
                (UserId(0), ItemId(1)),
                (UserId(0), ItemId(3)),
            ],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let users = vec![UserId(0); 200];
        assert!(sample_negatives(&g, &users, &mut rng)
            .unwrap()
            .iter()
            .all(|&j| j == ItemId(2)));
        let full =
            InteractionGraph::from_pairs(1, 2, [(UserId(0), ItemId(0)), (UserId(0), ItemId(1))]);
        assert!(matches!(
            sample_negatives(&full, &[UserId(0)], &mut rng),
            Err(TrainError::NoNegative { .. })
        ));
        let a = sample_negatives(&g, &[UserId(1); 20], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_negatives(&g, &[UserId(1); 20], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negatives_are_uniform() {
        // user 0 has items 0 and 1, so 8 candidates remain
        let g =
            InteractionGraph::from_pairs(1, 10, [(UserId(0), ItemId(0)), (UserId(0), ItemId(1))]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = sample_negatives(&g, &vec![UserId(0); 10_000], &mut rng).unwrap();
        let mut counts = [0f64; 10];
        for j in draws {
            counts[j.index()] += 1.0;
        }
        assert_eq!(counts[0] + counts[1], 0.0);
        let expected = 10_000.0 / 8.0;
        let chi2: f64 = counts[2..]
            .iter()
            .map(|c| (c - expected).powi(2) / expected)
            .sum();
        // 7 degrees of freedom, 0.999 quantile
        assert!(chi2 < 24.32, "chi2 = {chi2}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            mu_add: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn toy_setup() -> (TripartiteKg, DatasetSplit) {
        let data = generate(&SyntheticSpec::toy(7));
        let split = split_interactions(&data.kg.interactions, (0.8, 0.1, 0.1), 7).unwrap();
        (data.kg, split)
    }

    #[test]
    fn fixed_seed_gives_identical_trajectories() {
        let (kg, split) = toy_setup();
        let pools = AugmentationPools::default();
        let cfg = TrainConfig {
            dim: 8,
            n_experts: 2,
            epochs: 3,
            batch_size: 32,
            ..Default::default()
        };
        let run = || {
            train(&kg, &split, &pools, cfg.clone(), |_, _| Ok(()))
                .unwrap()
                .history
        };
        let (a, b) = (run(), run());
        assert_eq!(metrics_csv(&a, 10), metrics_csv(&b, 10));
        assert!(a.iter().all(|m| m.joint.is_finite()));
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let (kg, split) = toy_setup();
        let mut pools = AugmentationPools::default();
        let t = kg.ia()[0];
        pools.del_item.insert(t, 0);
        let cfg = TrainConfig {
            dim: 4,
            n_experts: 2,
            layers: 2,
            lambda_con: 0.5,
            lambda_reg: 0.01,
            mu_del: 0.05,
            batch_size: 16,
            ..Default::default()
        };
        let params = ModelParams::init(cfg.dims(&kg), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let views = prepare_epoch(&params, &kg, &split.train, &pools, &cfg, &mut rng);
        let batch = epoch_batches(&split.train, &kg.interactions, 16, &mut rng)
            .unwrap()
            .remove(0);
        let adj = Adjacency::new(&split.train);
        let mode = DecisionMode::Soft;
        let (_, grads) = loss_and_gradients(&params, &adj, &views, &batch, &cfg, mode).unwrap();
        let value = |p: &ModelParams| {
            loss_and_gradients(p, &adj, &views, &batch, &cfg, mode)
                .unwrap()
                .0
                .joint
        };
        let h = 1e-6;
        for (k, name) in TENSOR_NAMES.iter().enumerate() {
            let g = grads[k]
                .as_ref()
                .unwrap_or_else(|| panic!("{name} has no gradient"));
            let (rows, cols) = g.dim();
            for &(r, c) in &[(0, 0), (rows - 1, cols - 1), (rows / 2, cols / 2)] {
                let mut plus = params.clone();
                plus.tensor_mut(name)[[r, c]] += h;
                let mut minus = params.clone();
                minus.tensor_mut(name)[[r, c]] -= h;
                let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
                let a = g[[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
                assert!(
                    rel < 1e-3,
                    "{name}[{r},{c}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn training_lowers_the_loss() {
        let (kg, split) = toy_setup();
        let pools = AugmentationPools::default();
        let cfg = TrainConfig {
            dim: 16,
            n_experts: 2,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-2,
            patience: 0,
            ..Default::default()
        };
        let h = train(&kg, &split, &pools, cfg, |_, _| Ok(()))
            .unwrap()
            .history;
        assert!(
            h.last().unwrap().bpr < h[0].bpr * 0.9,
            "{} -> {}",
            h[0].bpr,
            h.last().unwrap().bpr
        );
    }

    #[test]
    fn no_confidence_mode_leaves_scorer_untouched() {
        let (kg, split) = toy_setup();
        let pools = AugmentationPools::default();
        let cfg = TrainConfig {
            dim: 8,
            n_experts: 2,
            epochs: 1,
            batch_size: 64,
            knowledge: KnowledgeMode::NoConfidence,
            ..Default::default()
        };
        let init = ModelParams::init(cfg.dims(&kg), cfg.seed);
        let out = train(&kg, &split, &pools, cfg, |_, _| Ok(())).unwrap();
        assert_eq!(out.params.expert_w, init.expert_w);
        assert_ne!(out.params.attr, init.attr);
    }
}
