//! Graph convolution and graph attention layers and the node classifiers
//! built from them.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    adam_step, glorot_uniform, AdamConfig, Axis, Csr, EngineError, ParamStore, Tape, Tensor, Var,
};
use crate::knn::{Graph, GraphError};
use crate::nn::{bias_name, init_dense, weight_name, HEAD_INIT_TAG, HEAD_PLAN_TAG};
use crate::train::{epoch_plan, stage_seed, EpochStats, TrainHyper};

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("invalid GNN config: {0}")]
    Config(String),
    #[error("graph is not ready for message passing: {0}")]
    GraphNotReady(&'static str),
    #[error("{0}")]
    Labels(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcnConfig {
    /// Layer widths, input first and class count last.
    pub dims: Vec<usize>,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            dims: vec![8, 16, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatConfig {
    pub input_dim: usize,
    pub heads: usize,
    /// Per-head output size of the hidden layers.
    pub head_dim: usize,
    pub hidden_layers: usize,
    pub classes: usize,
    pub slope: f32,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            heads: 2,
            head_dim: 8,
            hidden_layers: 1,
            classes: 10,
            slope: 0.2,
        }
    }
}

impl GatConfig {
    /// `(input width, per-head output width)` of every layer.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut d_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((d_in, self.head_dim));
            d_in = self.heads * self.head_dim;
        }
        dims.push((d_in, self.classes));
        dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum GnnConfig {
    Gcn(GcnConfig),
    Gat(GatConfig),
}

impl GnnConfig {
    pub fn input_dim(&self) -> usize {
        match self {
            GnnConfig::Gcn(c) => c.dims[0],
            GnnConfig::Gat(c) => c.input_dim,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            GnnConfig::Gcn(c) => *c.dims.last().expect("validated"),
            GnnConfig::Gat(c) => c.classes,
        }
    }

    pub fn validate(&self) -> Result<(), GnnError> {
        let ok = match self {
            GnnConfig::Gcn(c) => c.dims.len() >= 2 && !c.dims.contains(&0),
            GnnConfig::Gat(c) => c.input_dim > 0 && c.heads > 0 && c.head_dim > 0 && c.classes > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(GnnError::Config(format!("{self:?}")))
        }
    }
}

/// `out_i = sum_j c_ij (X_j W)` over the stored coefficients.
pub fn gcn_layer(tape: &mut Tape, graph: &Arc<Csr>, x: Var, w: Var) -> Result<Var, EngineError> {
    let xw = tape.matmul(x, w)?;
    tape.spmm(graph.clone(), xw)
}

/// One attention head: `a` is `K x 2`, column 0 scoring the receiving node
/// and column 1 the neighbour, so `e_ij = leaky_relu(a^T [W x_i || W x_j])`.
pub fn gat_head(
    tape: &mut Tape,
    graph: &Arc<Csr>,
    x: Var,
    w: Var,
    a: Var,
    slope: f32,
) -> Result<Var, EngineError> {
    let h = tape.matmul(x, w)?;
    let scores = tape.matmul(h, a)?;
    tape.edge_attention(scores, h, graph.clone(), slope)
}

fn head_name(prefix: &str, h: usize, part: &str) -> String {
    format!("{prefix}.head{h}.{part}")
}

/// Multi-head attention layer; heads are concatenated or averaged.
#[allow(clippy::too_many_arguments)]
pub fn gat_layer(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    graph: &Arc<Csr>,
    x: Var,
    heads: usize,
    concat: bool,
    slope: f32,
) -> Result<Var, EngineError> {
    let mut acc: Option<Var> = None;
    for h in 0..heads {
        let w = tape.param(store, &head_name(prefix, h, "weight"))?;
        let a = tape.param(store, &head_name(prefix, h, "att"))?;
        let out = gat_head(tape, graph, x, w, a, slope)?;
        acc = Some(match acc {
            None => out,
            Some(prev) if concat => tape.concat(prev, out, Axis::Cols)?,
            Some(prev) => tape.add(prev, out)?,
        });
    }
    let out = acc.expect("at least one head");
    if concat || heads == 1 {
        Ok(out)
    } else {
        tape.scale(out, 1.0 / heads as f32)
    }
}

#[derive(Debug, Clone)]
pub struct GnnModel {
    pub config: GnnConfig,
    pub store: ParamStore,
}

fn gcn_prefix(l: usize) -> String {
    format!("gcn.{l}")
}

fn gat_prefix(l: usize) -> String {
    format!("gat.{l}")
}

impl GnnModel {
    pub fn new<R: Rng + ?Sized>(config: GnnConfig, rng: &mut R) -> Result<Self, GnnError> {
        config.validate()?;
        let mut store = ParamStore::new();
        match &config {
            GnnConfig::Gcn(c) => {
                for (l, pair) in c.dims.windows(2).enumerate() {
                    init_dense(&mut store, &gcn_prefix(l), pair[0], pair[1], rng)?;
                }
            }
            GnnConfig::Gat(c) => {
                let dims = c.layer_dims();
                let last = dims.len() - 1;
                for (l, &(d_in, k)) in dims.iter().enumerate() {
                    let prefix = gat_prefix(l);
                    for h in 0..c.heads {
                        store.insert(
                            head_name(&prefix, h, "weight"),
                            glorot_uniform(d_in, k, rng),
                        )?;
                        store.insert(head_name(&prefix, h, "att"), glorot_uniform(k, 2, rng))?;
                    }
                    let width = if l == last { k } else { c.heads * k };
                    store.insert(bias_name(&prefix), Tensor::zeros(1, width))?;
                }
            }
        }
        Ok(Self { config, store })
    }

    pub fn from_store(config: GnnConfig, store: ParamStore) -> Result<Self, GnnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let template = Self::new(config.clone(), &mut rng)?;
        for (name, p) in template.store.iter() {
            if store.value(name)?.shape() != p.value.shape() {
                return Err(GnnError::Config(format!(
                    "parameter {name} has the wrong shape"
                )));
            }
        }
        Ok(Self { config, store })
    }

    /// Logits for every node; ReLU between layers, none after the last.
    pub fn forward(&self, tape: &mut Tape, graph: &Arc<Csr>, x: Var) -> Result<Var, EngineError> {
        let s = &self.store;
        let mut h = x;
        match &self.config {
            GnnConfig::Gcn(c) => {
                let layers = c.dims.len() - 1;
                for l in 0..layers {
                    let prefix = gcn_prefix(l);
                    let w = tape.param(s, &weight_name(&prefix))?;
                    let b = tape.param(s, &bias_name(&prefix))?;
                    h = gcn_layer(tape, graph, h, w)?;
                    h = tape.add_bias(h, b)?;
                    if l + 1 < layers {
                        h = tape.relu(h)?;
                    }
                }
            }
            GnnConfig::Gat(c) => {
                let layers = c.hidden_layers + 1;
                for l in 0..layers {
                    let prefix = gat_prefix(l);
                    let last = l + 1 == layers;
                    h = gat_layer(tape, s, &prefix, graph, h, c.heads, !last, c.slope)?;
                    let b = tape.param(s, &bias_name(&prefix))?;
                    h = tape.add_bias(h, b)?;
                    if !last {
                        h = tape.relu(h)?;
                    }
                }
            }
        }
        Ok(h)
    }

    pub fn predict_logits(&self, graph: &Graph, features: &[f32]) -> Result<Tensor, GnnError> {
        let csr = checked_csr(graph, &self.config)?;
        let mut tape = Tape::inference();
        let x = tape.constant(node_features(graph, features, self.config.input_dim())?);
        let logits = self.forward(&mut tape, &csr, x)?;
        Ok(tape.value(logits).clone())
    }
}

fn node_features(graph: &Graph, features: &[f32], d: usize) -> Result<Tensor, GnnError> {
    if features.len() != graph.n * d {
        return Err(GnnError::Engine(EngineError::DataLength {
            shape: vec![graph.n, d],
            len: features.len(),
        }));
    }
    Ok(Tensor::new(vec![graph.n, d], features.to_vec())?)
}

fn checked_csr(graph: &Graph, config: &GnnConfig) -> Result<Arc<Csr>, GnnError> {
    if !graph.self_loops {
        return Err(GnnError::GraphNotReady("self-loops missing"));
    }
    if matches!(config, GnnConfig::Gcn(_)) && graph.coefficients.is_none() {
        return Err(GnnError::GraphNotReady("coefficients not materialized"));
    }
    Ok(graph.to_csr())
}

/// Node classification on a fixed graph. Nodes `0..labels.len()` are the
/// labelled training nodes; the rest only take part in propagation.
///
/// Every step propagates over the whole graph and takes the loss over one
/// mini-batch of training nodes; a held-out share of training nodes per
/// epoch is scored for validation only.
pub fn train_gnn(
    graph: &Graph,
    features: &[f32],
    labels: &[usize],
    config: GnnConfig,
    hyper: &TrainHyper,
) -> Result<(GnnModel, Vec<EpochStats>), GnnError> {
    hyper.validate().map_err(GnnError::Config)?;
    if labels.is_empty() || labels.len() > graph.n {
        return Err(GnnError::Labels(format!(
            "{} labels for a graph of {} nodes",
            labels.len(),
            graph.n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= config.classes()) {
        return Err(GnnError::Labels(format!("label {bad} out of range")));
    }
    let csr = checked_csr(graph, &config)?;
    let x_value = node_features(graph, features, config.input_dim())?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(stage_seed(hyper.seed, HEAD_INIT_TAG));
    let mut model = GnnModel::new(config, &mut init_rng)?;
    let adam = AdamConfig::with_lr(hyper.lr);
    let mut plan_rng = ChaCha8Rng::seed_from_u64(stage_seed(hyper.seed, HEAD_PLAN_TAG));
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let plan = epoch_plan(labels.len(), hyper.val_fraction, &mut plan_rng);
        let mut train_loss = 0.0;
        for batch in plan.fit.chunks(hyper.batch_size) {
            let mut tape = Tape::new();
            let x = tape.constant(x_value.clone());
            let logits = model.forward(&mut tape, &csr, x)?;
            let labs = batch.iter().map(|&i| labels[i]).collect();
            let loss = tape.cross_entropy_rows(logits, batch.to_vec(), labs)?;
            train_loss +=
                tape.value(loss).item() as f64 * batch.len() as f64 / plan.fit.len() as f64;
            tape.backward_into(loss, &mut model.store)?;
            adam_step(&mut model.store, &adam);
        }
        let val_loss = if plan.val.is_empty() {
            None
        } else {
            let mut tape = Tape::inference();
            let x = tape.constant(x_value.clone());
            let logits = model.forward(&mut tape, &csr, x)?;
            let labs = plan.val.iter().map(|&i| labels[i]).collect();
            let loss = tape.cross_entropy_rows(logits, plan.val.clone(), labs)?;
            Some(tape.value(loss).item() as f64)
        };
        log::debug!("gnn epoch {epoch}: loss {train_loss:.4} val {val_loss:?}");
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
    }
    Ok((model, history))
}
