//! Variational autoencoder projecting standardized flows to a small latent space.
//!
//! The encoder is a ReLU trunk followed by two linear heads (`mu` and
//! `logvar`); the decoder mirrors it back to the input width. Downstream
//! classifiers consume `mu` only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{adam_step, AdamConfig, EngineError, ParamStore, Tape, Tensor, Var};
use crate::nn::{dense, init_dense};
use crate::train::{epoch_plan, stage_seed};

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("invalid VAE config: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    /// Input width followed by the hidden trunk widths.
    pub encoder_widths: Vec<usize>,
    pub latent_dim: usize,
    /// Hidden widths followed by the reconstruction width.
    pub decoder_widths: Vec<usize>,
    pub kl_weight: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![115, 64, 32],
            latent_dim: 8,
            decoder_widths: vec![32, 64, 115],
            kl_weight: 1.0,
            epochs: 20,
            batch_size: 128,
            lr: 0.001,
            val_fraction: 0.10,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn input_dim(&self) -> usize {
        self.encoder_widths[0]
    }

    pub fn validate(&self) -> Result<(), VaeError> {
        let bad = |m: &str| Err(VaeError::Config(m.to_string()));
        if self.encoder_widths.is_empty() || self.decoder_widths.is_empty() {
            return bad("encoder and decoder need at least one width");
        }
        if self
            .encoder_widths
            .iter()
            .chain(&self.decoder_widths)
            .any(|&w| w == 0)
            || self.latent_dim == 0
        {
            return bad("widths must be positive");
        }
        if self.decoder_widths.last() != self.encoder_widths.first() {
            return bad("decoder output width must equal encoder input width");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("validation fraction must be in [0, 1)");
        }
        Ok(())
    }

    fn decoder_dims(&self) -> Vec<usize> {
        std::iter::once(self.latent_dim)
            .chain(self.decoder_widths.iter().copied())
            .collect()
    }
}

/// Loss terms of one batch, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    pub recon: Var,
    pub kl: Var,
    pub total: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub store: ParamStore,
}

/// `z = mu + exp(0.5 logvar) * noise`; `noise` is a constant on the tape.
pub fn reparameterize_with_noise(
    tape: &mut Tape,
    mu: Var,
    logvar: Var,
    noise: Tensor,
) -> Result<Var, EngineError> {
    let eps = tape.constant(noise);
    let half = tape.scale(logvar, 0.5)?;
    let sigma = tape.exp(half)?;
    let spread = tape.mul(sigma, eps)?;
    tape.add(mu, spread)
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// Reparameterized sample with fresh `N(0, 1)` noise from `rng`.
pub fn reparameterize<R: Rng + ?Sized>(
    tape: &mut Tape,
    mu: Var,
    logvar: Var,
    rng: &mut R,
) -> Result<Var, EngineError> {
    let shape = tape.value(mu).shape().to_vec();
    let noise = standard_normal(shape[0], shape[1..].iter().product(), rng);
    reparameterize_with_noise(tape, mu, logvar, noise)
}

impl VaeModel {
    pub fn new(config: VaeConfig) -> Result<Self, VaeError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(config.seed, "vae.init"));
        let mut store = ParamStore::new();
        for (i, pair) in config.encoder_widths.windows(2).enumerate() {
            init_dense(&mut store, &format!("enc.{i}"), pair[0], pair[1], &mut rng)?;
        }
        let trunk_out = *config.encoder_widths.last().expect("validated");
        init_dense(&mut store, "enc.mu", trunk_out, config.latent_dim, &mut rng)?;
        init_dense(
            &mut store,
            "enc.logvar",
            trunk_out,
            config.latent_dim,
            &mut rng,
        )?;
        for (i, pair) in config.decoder_dims().windows(2).enumerate() {
            init_dense(&mut store, &format!("dec.{i}"), pair[0], pair[1], &mut rng)?;
        }
        Ok(Self { config, store })
    }

    /// Wraps trained parameters, checking that every expected name is present.
    pub fn from_store(config: VaeConfig, store: ParamStore) -> Result<Self, VaeError> {
        config.validate()?;
        let template = Self::new(config.clone())?;
        for (name, p) in template.store.iter() {
            let got = store.value(name)?;
            if got.shape() != p.value.shape() {
                return Err(VaeError::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, store })
    }

    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var), EngineError> {
        let mut h = x;
        for i in 0..self.config.encoder_widths.len() - 1 {
            h = dense(tape, &self.store, &format!("enc.{i}"), h)?;
            h = tape.relu(h)?;
        }
        let mu = dense(tape, &self.store, "enc.mu", h)?;
        let logvar = dense(tape, &self.store, "enc.logvar", h)?;
        Ok((mu, logvar))
    }

    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var, EngineError> {
        let layers = self.config.decoder_widths.len();
        let mut h = z;
        for i in 0..layers {
            h = dense(tape, &self.store, &format!("dec.{i}"), h)?;
            if i + 1 < layers {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Negative ELBO pieces for a batch, with externally supplied noise.
    ///
    /// `recon` is the squared reconstruction error summed over features and
    /// averaged over the batch; `kl` is the closed-form Gaussian KL averaged
    /// over the batch.
    pub fn elbo_loss(
        &self,
        tape: &mut Tape,
        x: Var,
        noise: Tensor,
    ) -> Result<ElboTerms, EngineError> {
        let (mu, logvar) = self.encode(tape, x)?;
        let z = reparameterize_with_noise(tape, mu, logvar, noise)?;
        let x_hat = self.decode(tape, z)?;
        let mse = tape.mse_loss(x_hat, x)?;
        let recon = tape.scale(mse, self.config.input_dim() as f32)?;
        let kl = tape.gaussian_kl(mu, logvar)?;
        let weighted = tape.scale(kl, self.config.kl_weight)?;
        let total = tape.add(recon, weighted)?;
        Ok(ElboTerms { recon, kl, total })
    }

    /// Posterior means for `rows` (row-major, `input_dim` wide). No sampling.
    pub fn embed(&self, rows: &[f32]) -> Result<Vec<f32>, EngineError> {
        let d = self.config.input_dim();
        let mut out = Vec::with_capacity(rows.len() / d * self.config.latent_dim);
        for chunk in rows.chunks(4096 * d) {
            let mut tape = Tape::inference();
            let x = tape.constant(Tensor::new(vec![chunk.len() / d, d], chunk.to_vec())?);
            let (mu, _) = self.encode(&mut tape, x)?;
            out.extend_from_slice(tape.value(mu).data());
        }
        Ok(out)
    }

    /// Mean loss terms over `rows` with noise from `rng`, without updating.
    pub fn evaluate(
        &self,
        rows: &[f32],
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, f64, f64), EngineError> {
        let d = self.config.input_dim();
        let n = rows.len() / d;
        let (mut total, mut recon, mut kl) = (0.0, 0.0, 0.0);
        for chunk in rows.chunks(1024 * d) {
            let b = chunk.len() / d;
            let mut tape = Tape::inference();
            let x = tape.constant(Tensor::matrix(b, d, chunk.to_vec()));
            let noise = standard_normal(b, self.config.latent_dim, rng);
            let t = self.elbo_loss(&mut tape, x, noise)?;
            let w = b as f64 / n as f64;
            total += w * tape.value(t.total).item() as f64;
            recon += w * tape.value(t.recon).item() as f64;
            kl += w * tape.value(t.kl).item() as f64;
        }
        Ok((total, recon, kl))
    }
}

fn gather(rows: &[f32], d: usize, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&rows[i * d..(i + 1) * d]);
    }
    Tensor::matrix(idx.len(), d, data)
}

/// Label-free mini-batch Adam training on the negative ELBO.
pub fn train_vae(
    rows: &[f32],
    config: VaeConfig,
) -> Result<(VaeModel, Vec<VaeEpochStats>), VaeError> {
    let mut model = VaeModel::new(config)?;
    let cfg = model.config.clone();
    let d = cfg.input_dim();
    if rows.is_empty() || !rows.len().is_multiple_of(d) {
        return Err(VaeError::Config(format!(
            "{} values are not a whole number of {d}-wide rows",
            rows.len()
        )));
    }
    let n = rows.len() / d;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut plan_rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "vae.plan"));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "vae.noise"));
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let plan = epoch_plan(n, cfg.val_fraction, &mut plan_rng);
        let (mut total, mut recon, mut kl) = (0.0f64, 0.0f64, 0.0f64);
        for batch in plan.fit.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let x = tape.constant(gather(rows, d, batch));
            let noise = standard_normal(batch.len(), cfg.latent_dim, &mut noise_rng);
            let terms = model.elbo_loss(&mut tape, x, noise)?;
            let kl_value = tape.value(terms.kl).item();
            debug_assert!(kl_value >= -1e-6, "negative KL {kl_value}");
            let w = batch.len() as f64 / plan.fit.len() as f64;
            total += w * tape.value(terms.total).item() as f64;
            recon += w * tape.value(terms.recon).item() as f64;
            kl += w * kl_value as f64;
            tape.backward_into(terms.total, &mut model.store)?;
            adam_step(&mut model.store, &adam);
        }
        let val_loss = if plan.val.is_empty() {
            None
        } else {
            let val_rows = gather(rows, d, &plan.val);
            Some(model.evaluate(val_rows.data(), &mut noise_rng)?.0)
        };
        log::debug!(
            "vae epoch {epoch}: loss {total:.4} recon {recon:.4} kl {kl:.4} val {val_loss:?}"
        );
        history.push(VaeEpochStats {
            epoch,
            train_loss: total,
            recon,
            kl,
            val_loss,
        });
    }
    Ok((model, history))
}
