//! Learnable parameters, their initialization and checkpoint files.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_users: usize,
    pub n_items: usize,
    pub n_attributes: usize,
    pub n_relations: usize,
    pub dim: usize,
    pub n_experts: usize,
}

/// All learnable tensors.
///
/// * `user`, `item`, `attr`, `relation`: embedding tables (`n × d`).
/// * `att_w` (`d × d`) and `att_a` (`2d × 1`): attention pre-aggregation.
/// * `transition` (`d × 2d`): maps `[x_i' ‖ x_a]` to triplet features.
/// * `gate_w` (`N_e × d`), `gate_b` (`1 × N_e`): expert gating.
/// * `expert_w` (`N_e·d × d`), `expert_b` (`1 × N_e·d`): the stacked linear experts;
///   rows `k·d..(k+1)·d` of `expert_w` hold expert `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub seed: u64,
    pub user: Array2<f64>,
    pub item: Array2<f64>,
    pub attr: Array2<f64>,
    pub relation: Array2<f64>,
    pub att_w: Array2<f64>,
    pub att_a: Array2<f64>,
    pub transition: Array2<f64>,
    pub gate_w: Array2<f64>,
    pub gate_b: Array2<f64>,
    pub expert_w: Array2<f64>,
    pub expert_b: Array2<f64>,
}

pub const TENSOR_NAMES: [&str; 11] = [
    "user",
    "item",
    "attr",
    "relation",
    "att_w",
    "att_a",
    "transition",
    "gate_w",
    "gate_b",
    "expert_w",
    "expert_b",
];

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.dim;
        let ne = dims.n_experts;
        ModelParams {
            dims,
            seed,
            user: xavier(&mut rng, dims.n_users, d),
            item: xavier(&mut rng, dims.n_items, d),
            attr: xavier(&mut rng, dims.n_attributes, d),
            relation: xavier(&mut rng, dims.n_relations, d),
            att_w: xavier(&mut rng, d, d),
            att_a: xavier(&mut rng, 2 * d, 1),
            transition: xavier(&mut rng, d, 2 * d),
            gate_w: xavier(&mut rng, ne, d),
            gate_b: Array2::zeros((1, ne)),
            expert_w: xavier(&mut rng, ne * d, d),
            expert_b: Array2::zeros((1, ne * d)),
        }
    }

    pub fn expected_shape(dims: &ModelDims, name: &str) -> (usize, usize) {
        let d = dims.dim;
        let ne = dims.n_experts;
        match name {
            "user" => (dims.n_users, d),
            "item" => (dims.n_items, d),
            "attr" => (dims.n_attributes, d),
            "relation" => (dims.n_relations, d),
            "att_w" => (d, d),
            "att_a" => (2 * d, 1),
            "transition" => (d, 2 * d),
            "gate_w" => (ne, d),
            "gate_b" => (1, ne),
            "expert_w" => (ne * d, d),
            "expert_b" => (1, ne * d),
            other => panic!("unknown tensor `{other}`"),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Array2<f64>); 11] {
        [
            ("user", &self.user),
            ("item", &self.item),
            ("attr", &self.attr),
            ("relation", &self.relation),
            ("att_w", &self.att_w),
            ("att_a", &self.att_a),
            ("transition", &self.transition),
            ("gate_w", &self.gate_w),
            ("gate_b", &self.gate_b),
            ("expert_w", &self.expert_w),
            ("expert_b", &self.expert_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Array2<f64>); 11] {
        [
            ("user", &mut self.user),
            ("item", &mut self.item),
            ("attr", &mut self.attr),
            ("relation", &mut self.relation),
            ("att_w", &mut self.att_w),
            ("att_a", &mut self.att_a),
            ("transition", &mut self.transition),
            ("gate_w", &mut self.gate_w),
            ("gate_b", &mut self.gate_b),
            ("expert_w", &mut self.expert_w),
            ("expert_b", &mut self.expert_b),
        ]
    }

    pub fn tensor(&self, name: &str) -> &Array2<f64> {
        self.tensors()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .expect("known tensor")
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.tensors_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .expect("known tensor")
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn vars<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            user: tape.leaf(self.user.clone()),
            item: tape.leaf(self.item.clone()),
            attr: tape.leaf(self.attr.clone()),
            relation: tape.leaf(self.relation.clone()),
            att_w: tape.leaf(self.att_w.clone()),
            att_a: tape.leaf(self.att_a.clone()),
            transition: tape.leaf(self.transition.clone()),
            gate_w: tape.leaf(self.gate_w.clone()),
            gate_b: tape.leaf(self.gate_b.clone()),
            expert_w: tape.leaf(self.expert_w.clone()),
            expert_b: tape.leaf(self.expert_b.clone()),
        }
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<(), DataError> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_owned(),
            config_hash: config_hash.to_owned(),
            seed: self.seed,
            dims: self.dims,
            tensors: self
                .tensors()
                .iter()
                .map(|(name, t)| StoredTensor {
                    name: (*name).to_owned(),
                    shape: [t.nrows(), t.ncols()],
                    data: t.iter().copied().collect(),
                })
                .collect(),
        };
        let body = serde_json::to_vec(&ckpt).map_err(|e| DataError::Other(e.to_string()))?;
        crate::io::write_atomic(path, &body)
    }

    /// Loads a checkpoint, rejecting any tensor whose shape differs from `dims`.
    pub fn load(path: &Path, dims: &ModelDims) -> Result<(Self, String), DataError> {
        let body = fs::read(path).map_err(|e| DataError::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&body)
            .map_err(|e| DataError::Other(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(DataError::Other(format!(
                "{}: unsupported format `{}`",
                path.display(),
                ckpt.format
            )));
        }
        let mut params = ModelParams::init(*dims, ckpt.seed);
        let mut seen = 0;
        for st in &ckpt.tensors {
            if !TENSOR_NAMES.contains(&st.name.as_str()) {
                return Err(DataError::Other(format!(
                    "unknown tensor `{}` in checkpoint",
                    st.name
                )));
            }
            let expected = Self::expected_shape(dims, &st.name);
            let found = (st.shape[0], st.shape[1]);
            if expected != found || st.data.len() != found.0 * found.1 {
                return Err(DataError::ShapeMismatch {
                    name: st.name.clone(),
                    expected,
                    found,
                });
            }
            *params.tensor_mut(&st.name) = Array2::from_shape_vec(found, st.data.clone())
                .map_err(|e| DataError::Other(e.to_string()))?;
            seen += 1;
        }
        if seen != TENSOR_NAMES.len() {
            return Err(DataError::Other("checkpoint is missing tensors".into()));
        }
        Ok((params, ckpt.config_hash))
    }
}

const CHECKPOINT_FORMAT: &str = "ckg-params-v1";

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config_hash: String,
    seed: u64,
    dims: ModelDims,
    tensors: Vec<StoredTensor>,
}

/// Tape handles for every tensor of [`ModelParams`].
#[derive(Clone, Copy)]
pub struct ParamVars<'t> {
    pub user: Var<'t>,
    pub item: Var<'t>,
    pub attr: Var<'t>,
    pub relation: Var<'t>,
    pub att_w: Var<'t>,
    pub att_a: Var<'t>,
    pub transition: Var<'t>,
    pub gate_w: Var<'t>,
    pub gate_b: Var<'t>,
    pub expert_w: Var<'t>,
    pub expert_b: Var<'t>,
}

impl<'t> ParamVars<'t> {
    pub fn all(&self) -> [(&'static str, Var<'t>); 11] {
        [
            ("user", self.user),
            ("item", self.item),
            ("attr", self.attr),
            ("relation", self.relation),
            ("att_w", self.att_w),
            ("att_a", self.att_a),
            ("transition", self.transition),
            ("gate_w", self.gate_w),
            ("gate_b", self.gate_b),
            ("expert_w", self.expert_w),
            ("expert_b", self.expert_b),
        ]
    }
}
