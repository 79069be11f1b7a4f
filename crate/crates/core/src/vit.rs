//! Vision-Transformer encoder over flow records reshaped as one-channel images.
//!
//! A record of `rows * cols` values is laid out row-major as a `rows x cols`
//! image; each image column is one patch of `rows` values. Patches are
//! linearly embedded, a class token is prepended, positional embeddings are
//! added, and residual self-attention / feed-forward blocks follow. The
//! class-token state is projected to the output representation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    adam_step, normal_init, AdamConfig, EngineError, ParamStore, Tape, Tensor, Var,
};
use crate::nn::{dense, init_dense, MlpHead};
use crate::train::{epoch_plan, stage_seed, EpochStats};

#[derive(Debug, Error)]
pub enum VitError {
    #[error("invalid ViT config: {0}")]
    Config(String),
    #[error("record has {found} values, expected {expected}")]
    RecordLength { expected: usize, found: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub image_rows: usize,
    pub image_cols: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub output_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_rows: 5,
            image_cols: 23,
            embed_dim: 16,
            heads: 2,
            layers: 2,
            ffn_hidden: 32,
            output_dim: 8,
            epochs: 20,
            batch_size: 128,
            lr: 0.001,
            val_fraction: 0.10,
            seed: 0,
        }
    }
}

impl VitConfig {
    pub fn feature_count(&self) -> usize {
        self.image_rows * self.image_cols
    }

    pub fn patch_count(&self) -> usize {
        self.image_cols
    }

    pub fn patch_dim(&self) -> usize {
        self.image_rows
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.patch_count() + 1
    }

    pub fn validate(&self) -> Result<(), VitError> {
        let fields = [
            self.image_rows,
            self.image_cols,
            self.embed_dim,
            self.heads,
            self.ffn_hidden,
            self.output_dim,
            self.batch_size,
        ];
        if fields.contains(&0) {
            return Err(VitError::Config("sizes must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(VitError::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Splits a record into image-column patches: patch `j` is
/// `(x[j], x[cols + j], x[2 cols + j], ...)`. Output is `cols x rows`, row-major.
pub fn patchify(x: &[f32], rows: usize, cols: usize) -> Result<Vec<f32>, VitError> {
    if x.len() != rows * cols {
        return Err(VitError::RecordLength {
            expected: rows * cols,
            found: x.len(),
        });
    }
    let mut out = Vec::with_capacity(x.len());
    for j in 0..cols {
        for r in 0..rows {
            out.push(x[r * cols + j]);
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(p: &[f32], rows: usize, cols: usize) -> Result<Vec<f32>, VitError> {
    if p.len() != rows * cols {
        return Err(VitError::RecordLength {
            expected: rows * cols,
            found: p.len(),
        });
    }
    let mut x = vec![0.0; rows * cols];
    for j in 0..cols {
        for r in 0..rows {
            x[r * cols + j] = p[j * rows + r];
        }
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct VitModel {
    pub config: VitConfig,
    pub store: ParamStore,
}

fn layer_name(l: usize, part: &str) -> String {
    format!("layer{l}.{part}")
}

impl VitModel {
    pub fn new(config: VitConfig) -> Result<Self, VitError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(config.seed, "vit.init"));
        let d = config.embed_dim;
        let mut store = ParamStore::new();
        init_dense(&mut store, "patch_proj", config.patch_dim(), d, &mut rng)?;
        store.insert("cls", normal_init(1, d, 0.02, &mut rng))?;
        store.insert("pos", normal_init(config.tokens(), d, 0.02, &mut rng))?;
        for l in 0..config.layers {
            for part in ["q", "k", "v"] {
                let w = crate::engine::glorot_uniform(d, d, &mut rng);
                store.insert(layer_name(l, part), w)?;
            }
            init_dense(&mut store, &layer_name(l, "out"), d, d, &mut rng)?;
            init_dense(
                &mut store,
                &layer_name(l, "ffn.0"),
                d,
                config.ffn_hidden,
                &mut rng,
            )?;
            init_dense(
                &mut store,
                &layer_name(l, "ffn.1"),
                config.ffn_hidden,
                d,
                &mut rng,
            )?;
        }
        init_dense(&mut store, "proj", d, config.output_dim, &mut rng)?;
        Ok(Self { config, store })
    }

    pub fn from_store(config: VitConfig, store: ParamStore) -> Result<Self, VitError> {
        let template = Self::new(config.clone())?;
        for (name, p) in template.store.iter() {
            let got = store.value(name)?;
            if got.shape() != p.value.shape() {
                return Err(VitError::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, store })
    }

    /// Patch matrix `(B * patches) x patch_dim` for a batch of records.
    pub fn patch_batch(&self, records: &[f32]) -> Result<Tensor, VitError> {
        let f = self.config.feature_count();
        if records.is_empty() || !records.len().is_multiple_of(f) {
            return Err(VitError::RecordLength {
                expected: f,
                found: records.len(),
            });
        }
        let mut data = Vec::with_capacity(records.len());
        for rec in records.chunks_exact(f) {
            data.extend(patchify(
                rec,
                self.config.image_rows,
                self.config.image_cols,
            )?);
        }
        let b = records.len() / f;
        Ok(Tensor::matrix(
            b * self.config.patch_count(),
            self.config.patch_dim(),
            data,
        ))
    }

    /// Representation `B x output_dim`, plus the attention output of every
    /// layer (whose weights can be read back from the tape).
    pub fn encoder_forward_traced(
        &self,
        tape: &mut Tape,
        patches: Var,
    ) -> Result<(Var, Vec<Var>), EngineError> {
        let cfg = &self.config;
        let s = &self.store;
        let embedded = dense(tape, s, "patch_proj", patches)?;
        let cls = tape.param(s, "cls")?;
        let tokens = tape.prepend_row(embedded, cls, cfg.patch_count())?;
        let pos = tape.param(s, "pos")?;
        let mut h = tape.add_tiled(tokens, pos)?;
        let mut attention = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let wq = tape.param(s, &layer_name(l, "q"))?;
            let wk = tape.param(s, &layer_name(l, "k"))?;
            let wv = tape.param(s, &layer_name(l, "v"))?;
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let att = tape.self_attention(q, k, v, cfg.tokens(), cfg.heads)?;
            attention.push(att);
            let o = dense(tape, s, &layer_name(l, "out"), att)?;
            h = tape.add(h, o)?;
            let f = dense(tape, s, &layer_name(l, "ffn.0"), h)?;
            let f = tape.relu(f)?;
            let f = dense(tape, s, &layer_name(l, "ffn.1"), f)?;
            h = tape.add(h, f)?;
        }
        let groups = tape.value(h).rows() / cfg.tokens();
        let cls_rows = (0..groups).map(|g| g * cfg.tokens()).collect();
        let cls_state = tape.select_rows(h, cls_rows)?;
        let rep = dense(tape, s, "proj", cls_state)?;
        Ok((rep, attention))
    }

    pub fn encoder_forward(&self, tape: &mut Tape, patches: Var) -> Result<Var, EngineError> {
        Ok(self.encoder_forward_traced(tape, patches)?.0)
    }

    /// Representations of a batch of raw records.
    pub fn represent(&self, records: &[f32]) -> Result<Vec<f32>, VitError> {
        let mut tape = Tape::inference();
        let p = tape.constant(self.patch_batch(records)?);
        let rep = self.encoder_forward(&mut tape, p)?;
        Ok(tape.value(rep).data().to_vec())
    }
}

/// ViT encoder with a stacked MLP classifier.
#[derive(Debug, Clone)]
pub struct VitClassifier {
    pub encoder: VitModel,
    pub head: MlpHead,
}

impl VitClassifier {
    pub fn new(config: VitConfig, hidden: usize, classes: usize) -> Result<Self, VitError> {
        let encoder = VitModel::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(encoder.config.seed, "vit.head"));
        let head = MlpHead::new(vec![encoder.config.output_dim, hidden, classes], &mut rng)?;
        Ok(Self { encoder, head })
    }

    pub fn logits(&self, tape: &mut Tape, patches: Var) -> Result<Var, EngineError> {
        let rep = self.encoder.encoder_forward(tape, patches)?;
        self.head.forward(tape, rep)
    }

    /// Logits for records, evaluated in chunks.
    pub fn predict_logits(&self, records: &[f32]) -> Result<Tensor, VitError> {
        let f = self.encoder.config.feature_count();
        let mut data = Vec::new();
        let mut rows = 0;
        for chunk in records.chunks(512 * f) {
            let mut tape = Tape::inference();
            let p = tape.constant(self.encoder.patch_batch(chunk)?);
            let logits = self.logits(&mut tape, p)?;
            rows += tape.value(logits).rows();
            data.extend_from_slice(tape.value(logits).data());
        }
        let classes = *self.head.dims.last().expect("head dims");
        Ok(Tensor::matrix(rows, classes, data))
    }

    fn mean_loss(&self, records: &[f32], labels: &[usize]) -> Result<f64, VitError> {
        let f = self.encoder.config.feature_count();
        let n = labels.len();
        let mut total = 0.0;
        for (chunk, lab) in records.chunks(512 * f).zip(labels.chunks(512)) {
            let mut tape = Tape::inference();
            let p = tape.constant(self.encoder.patch_batch(chunk)?);
            let logits = self.logits(&mut tape, p)?;
            let loss = tape.cross_entropy_loss(logits, lab)?;
            total += tape.value(loss).item() as f64 * lab.len() as f64 / n as f64;
        }
        Ok(total)
    }
}

/// End-to-end supervised training of encoder and head under one
/// cross-entropy objective.
pub fn train_vit_mlp(
    records: &[f32],
    labels: &[usize],
    config: VitConfig,
    hidden: usize,
    classes: usize,
) -> Result<(VitClassifier, Vec<EpochStats>), VitError> {
    let mut model = VitClassifier::new(config, hidden, classes)?;
    let cfg = model.encoder.config.clone();
    let f = cfg.feature_count();
    if records.len() != labels.len() * f || labels.is_empty() {
        return Err(VitError::RecordLength {
            expected: labels.len() * f,
            found: records.len(),
        });
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut plan_rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "vit.plan"));
    let mut history = Vec::with_capacity(cfg.epochs);
    let gather = |idx: &[usize]| -> (Vec<f32>, Vec<usize>) {
        let mut r = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            r.extend_from_slice(&records[i * f..(i + 1) * f]);
        }
        (r, idx.iter().map(|&i| labels[i]).collect())
    };
    for epoch in 0..cfg.epochs {
        let plan = epoch_plan(labels.len(), cfg.val_fraction, &mut plan_rng);
        let mut train_loss = 0.0;
        for batch in plan.fit.chunks(cfg.batch_size) {
            let (recs, labs) = gather(batch);
            let mut tape = Tape::new();
            let p = tape.constant(model.encoder.patch_batch(&recs)?);
            let logits = model.logits(&mut tape, p)?;
            let loss = tape.cross_entropy_loss(logits, &labs)?;
            train_loss +=
                tape.value(loss).item() as f64 * batch.len() as f64 / plan.fit.len() as f64;
            tape.backward_into_many(loss, &mut [&mut model.encoder.store, &mut model.head.store])?;
            adam_step(&mut model.encoder.store, &adam);
            adam_step(&mut model.head.store, &adam);
        }
        let val_loss = if plan.val.is_empty() {
            None
        } else {
            let (recs, labs) = gather(&plan.val);
            Some(model.mean_loss(&recs, &labs)?)
        };
        log::debug!("vit-mlp epoch {epoch}: loss {train_loss:.4} val {val_loss:?}");
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
    }
    Ok((model, history))
}
