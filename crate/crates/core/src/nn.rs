//! Dense layers and multilayer perceptrons on top of the engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{
    adam_step, glorot_uniform, AdamConfig, EngineError, ParamStore, Tape, Tensor, Var,
};
use crate::train::{epoch_plan, stage_seed, EpochStats, TrainHyper};

/// Seed tags of supervised heads; graph classifiers reuse them so that an
/// edgeless graph reproduces the dense head exactly.
pub const HEAD_INIT_TAG: &str = "head.init";
pub const HEAD_PLAN_TAG: &str = "head.plan";

pub fn weight_name(prefix: &str) -> String {
    format!("{prefix}.weight")
}

pub fn bias_name(prefix: &str) -> String {
    format!("{prefix}.bias")
}

/// Registers `{prefix}.weight` (Glorot uniform) and `{prefix}.bias` (zeros).
pub fn init_dense<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<(), EngineError> {
    store.insert(weight_name(prefix), glorot_uniform(fan_in, fan_out, rng))?;
    store.insert(bias_name(prefix), Tensor::zeros(1, fan_out))
}

/// `x W + b`.
pub fn dense(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
) -> Result<Var, EngineError> {
    let w = tape.param(store, &weight_name(prefix))?;
    let b = tape.param(store, &bias_name(prefix))?;
    let h = tape.matmul(x, w)?;
    tape.add_bias(h, b)
}

/// Layers `{prefix}.0 .. {prefix}.{n-2}` for `dims = [in, hidden.., out]`.
pub fn init_mlp<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    dims: &[usize],
    rng: &mut R,
) -> Result<(), EngineError> {
    for (i, pair) in dims.windows(2).enumerate() {
        init_dense(store, &format!("{prefix}.{i}"), pair[0], pair[1], rng)?;
    }
    Ok(())
}

/// Dense layers with ReLU between them and none after the last.
pub fn mlp_forward(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    layers: usize,
    x: Var,
) -> Result<Var, EngineError> {
    let mut h = x;
    for i in 0..layers {
        h = dense(tape, store, &format!("{prefix}.{i}"), h)?;
        if i + 1 < layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Feed-forward classifier head with its own parameters.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub dims: Vec<usize>,
    pub store: ParamStore,
}

impl MlpHead {
    pub fn new<R: Rng + ?Sized>(dims: Vec<usize>, rng: &mut R) -> Result<Self, EngineError> {
        let mut store = ParamStore::new();
        init_mlp(&mut store, "mlp", &dims, rng)?;
        Ok(Self { dims, store })
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, EngineError> {
        mlp_forward(tape, &self.store, "mlp", self.layers(), x)
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.dims.last().expect("head has dims")
    }

    /// Logits for row-major `features`, evaluated in chunks.
    pub fn predict_logits(&self, features: &[f32]) -> Result<Tensor, EngineError> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(features.len() / d * self.classes());
        for chunk in features.chunks(4096 * d) {
            let mut tape = Tape::inference();
            let x = tape.constant(Tensor::new(vec![chunk.len() / d, d], chunk.to_vec())?);
            let logits = self.forward(&mut tape, x)?;
            data.extend_from_slice(tape.value(logits).data());
        }
        Tensor::new(vec![features.len() / d, self.classes()], data)
    }

    pub fn mean_loss(&self, features: &[f32], labels: &[usize]) -> Result<f64, EngineError> {
        let logits = self.predict_logits(features)?;
        let mut tape = Tape::inference();
        let l = tape.constant(logits);
        let loss = tape.cross_entropy_loss(l, labels)?;
        Ok(tape.value(loss).item() as f64)
    }
}

fn gather(features: &[f32], d: usize, idx: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&features[i * d..(i + 1) * d]);
    }
    out
}

/// Mini-batch cross-entropy training of a fresh head on fixed features.
pub fn train_mlp_head(
    features: &[f32],
    labels: &[usize],
    dims: Vec<usize>,
    hyper: &TrainHyper,
) -> Result<(MlpHead, Vec<EpochStats>), EngineError> {
    let d = dims[0];
    if labels.is_empty() || features.len() != labels.len() * d {
        return Err(EngineError::DataLength {
            shape: vec![labels.len(), d],
            len: features.len(),
        });
    }
    hyper.validate().map_err(|msg| EngineError::BadArgument {
        op: "train_mlp_head",
        msg,
    })?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(stage_seed(hyper.seed, HEAD_INIT_TAG));
    let mut head = MlpHead::new(dims, &mut init_rng)?;
    let adam = AdamConfig::with_lr(hyper.lr);
    let mut plan_rng = ChaCha8Rng::seed_from_u64(stage_seed(hyper.seed, HEAD_PLAN_TAG));
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let plan = epoch_plan(labels.len(), hyper.val_fraction, &mut plan_rng);
        let mut train_loss = 0.0;
        for batch in plan.fit.chunks(hyper.batch_size) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::matrix(batch.len(), d, gather(features, d, batch)));
            let labs: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let logits = head.forward(&mut tape, x)?;
            let loss = tape.cross_entropy_loss(logits, &labs)?;
            train_loss +=
                tape.value(loss).item() as f64 * batch.len() as f64 / plan.fit.len() as f64;
            tape.backward_into(loss, &mut head.store)?;
            adam_step(&mut head.store, &adam);
        }
        let val_loss = if plan.val.is_empty() {
            None
        } else {
            let labs: Vec<usize> = plan.val.iter().map(|&i| labels[i]).collect();
            Some(head.mean_loss(&gather(features, d, &plan.val), &labs)?)
        };
        log::debug!("mlp epoch {epoch}: loss {train_loss:.4} val {val_loss:?}");
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
    }
    Ok((head, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_learns_separable_classes() {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let c = i % 2;
            let s = if c == 0 { -1.0 } else { 1.0 };
            features.extend_from_slice(&[s + 0.01 * (i as f32 % 7.0), s]);
            labels.push(c);
        }
        let hyper = TrainHyper {
            epochs: 30,
            batch_size: 16,
            lr: 0.01,
            ..TrainHyper::default()
        };
        let (head, history) = train_mlp_head(&features, &labels, vec![2, 8, 2], &hyper).unwrap();
        assert_eq!(history.len(), 30);
        let pred = head.predict_logits(&features).unwrap().argmax_rows();
        assert_eq!(pred, labels);
    }

    #[test]
    fn validation_rows_do_not_affect_training() {
        let features: Vec<f32> = (0..40).map(|i| (i as f32 * 0.37).sin()).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let hyper = TrainHyper {
            epochs: 1,
            val_fraction: 0.25,
            ..TrainHyper::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(hyper.seed, HEAD_PLAN_TAG));
        let plan = epoch_plan(20, 0.25, &mut rng);
        let mut flipped = labels.clone();
        for &v in &plan.val {
            flipped[v] = (flipped[v] + 1) % 3;
        }
        let (a, _) = train_mlp_head(&features, &labels, vec![2, 4, 3], &hyper).unwrap();
        let (b, _) = train_mlp_head(&features, &flipped, vec![2, 4, 3], &hyper).unwrap();
        for (name, p) in a.store.iter() {
            assert_eq!(p.value, b.store.value(name).unwrap().clone());
        }
    }
}
