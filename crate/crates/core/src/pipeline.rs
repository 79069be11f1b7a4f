//! The four detection pipelines, their shared data preparation, and the
//! run-directory artifacts they leave behind.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, ClassId, DataError, DataMatrix, NUM_CLASSES};
use crate::engine::{read_checkpoint, write_checkpoint, CheckpointError, EngineError, ParamStore};
use crate::gnn::{train_gnn, GatConfig, GcnConfig, GnnConfig, GnnError, GnnModel};
use crate::knn::{assemble_transductive, Graph, GraphError};
use crate::metrics::{EvalReport, MetricsError};
use crate::nn::{train_mlp_head, MlpHead};
use crate::train::{stage_seed, EpochStats, TrainHyper};
use crate::vae::{train_vae, VaeConfig, VaeError, VaeModel};
use crate::vit::{train_vit_mlp, VitClassifier, VitConfig, VitError, VitModel};

pub const EMBEDDING_MAGIC: &[u8; 5] = b"NBEM1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("graph pipelines only classify nodes of their stored graph")]
    TransductiveOnly,
    #[error("run directory: {0}")]
    Run(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineKind {
    VaeMlp,
    VaeGcn,
    VaeGat,
    VitMlp,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 4] = [
        PipelineKind::VaeMlp,
        PipelineKind::VaeGcn,
        PipelineKind::VaeGat,
        PipelineKind::VitMlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineKind::VaeMlp => "vae-mlp",
            PipelineKind::VaeGcn => "vae-gcn",
            PipelineKind::VaeGat => "vae-gat",
            PipelineKind::VitMlp => "vit-mlp",
        }
    }

    pub fn is_graph(self) -> bool {
        matches!(self, PipelineKind::VaeGcn | PipelineKind::VaeGat)
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown pipeline kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    Multiclass,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Binary => "binary",
            Task::Multiclass => "multiclass",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Task::Binary => 2,
            Task::Multiclass => NUM_CLASSES,
        }
    }

    pub fn label(self, class: ClassId) -> usize {
        match self {
            Task::Binary => class.binary() as usize,
            Task::Multiclass => class.index(),
        }
    }

    pub fn class_names(self) -> Vec<String> {
        match self {
            Task::Binary => vec!["benign".into(), "attack".into()],
            Task::Multiclass => ClassId::all().map(|c| c.name().to_string()).collect(),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "binary" => Ok(Task::Binary),
            "multiclass" => Ok(Task::Multiclass),
            _ => Err(format!("unknown task `{s}`")),
        }
    }
}

/// Everything a pipeline run needs besides the data. Training settings in
/// `hyper` override the corresponding fields of the model configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub hyper: TrainHyper,
    pub vae: VaeConfig,
    pub vit: VitConfig,
    pub gcn: GcnConfig,
    pub gat: GatConfig,
    pub mlp_hidden: usize,
    pub knn_k: usize,
    /// Replace the kNN graph with self-loops only.
    pub edgeless_graph: bool,
    /// Per-class row cap applied before splitting.
    pub subsample_per_class: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            hyper: TrainHyper::default(),
            vae: VaeConfig::default(),
            vit: VitConfig::default(),
            gcn: GcnConfig::default(),
            gat: GatConfig::default(),
            mlp_hidden: 32,
            knn_k: 3,
            edgeless_graph: false,
            subsample_per_class: None,
        }
    }
}

impl PipelineConfig {
    fn vae_config(&self, n_features: usize) -> VaeConfig {
        let h = &self.hyper;
        let mut c = self.vae.clone();
        if let Some(first) = c.encoder_widths.first_mut() {
            *first = n_features;
        }
        if let Some(last) = c.decoder_widths.last_mut() {
            *last = n_features;
        }
        c.epochs = h.epochs;
        c.batch_size = h.batch_size;
        c.lr = h.lr;
        c.val_fraction = h.val_fraction;
        c.seed = h.seed;
        c
    }

    fn vit_config(&self) -> VitConfig {
        let h = &self.hyper;
        VitConfig {
            epochs: h.epochs,
            batch_size: h.batch_size,
            lr: h.lr,
            val_fraction: h.val_fraction,
            seed: h.seed,
            ..self.vit.clone()
        }
    }

    fn gnn_config(&self, kind: PipelineKind, input_dim: usize, classes: usize) -> GnnConfig {
        match kind {
            PipelineKind::VaeGat => GnnConfig::Gat(GatConfig {
                input_dim,
                classes,
                ..self.gat.clone()
            }),
            _ => {
                let mut dims = self.gcn.dims.clone();
                if let Some(first) = dims.first_mut() {
                    *first = input_dim;
                }
                if let Some(last) = dims.last_mut() {
                    *last = classes;
                }
                GnnConfig::Gcn(GcnConfig { dims })
            }
        }
    }

    fn head_dims(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        vec![input_dim, self.mlp_hidden, classes]
    }
}

/// Standardized train / test rows with task labels.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub task: Task,
    pub n_features: usize,
    pub train_x: Vec<f32>,
    pub train_y: Vec<usize>,
    pub test_x: Vec<f32>,
    pub test_y: Vec<usize>,
}

impl PreparedData {
    pub fn n_train(&self) -> usize {
        self.train_y.len()
    }

    pub fn n_test(&self) -> usize {
        self.test_y.len()
    }
}

/// Optional stratified cap per task label, seeded 80/20 split, and
/// standardization with statistics of the training rows.
pub fn prepare(
    data: &DataMatrix,
    task: Task,
    seed: u64,
    subsample_per_class: Option<usize>,
) -> Result<PreparedData, PipelineError> {
    let labels: Vec<usize> = data.labels.iter().map(|&c| task.label(c)).collect();
    let data = match subsample_per_class {
        Some(cap) => {
            let keep = dataset::stratified_subsample(&labels, cap, stage_seed(seed, "subsample"))?;
            data.select(&keep)
        }
        None => data.clone(),
    };
    let labels: Vec<usize> = data.labels.iter().map(|&c| task.label(c)).collect();
    let split = dataset::split(data.len(), stage_seed(seed, "split"))?;
    let standardizer = dataset::Standardizer::fit(&data, &split.train_idx);
    let d = data.n_features;
    let gather = |idx: &[usize]| {
        let mut x = vec![0.0f32; idx.len() * d];
        for (k, &i) in idx.iter().enumerate() {
            standardizer.transform_row(data.row(i), &mut x[k * d..(k + 1) * d]);
        }
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        (x, y)
    };
    let (train_x, train_y) = gather(&split.train_idx);
    let (test_x, test_y) = gather(&split.test_idx);
    Ok(PreparedData {
        task,
        n_features: d,
        train_x,
        train_y,
        test_x,
        test_y,
    })
}

#[derive(Debug, Clone)]
pub enum PipelineModel {
    VaeMlp {
        vae: VaeModel,
        head: MlpHead,
    },
    /// Graph classifier with the graph and node features it was trained on;
    /// nodes `0..n_train` are training rows, the rest test rows.
    VaeGnn {
        kind: PipelineKind,
        vae: VaeModel,
        gnn: GnnModel,
        graph: Graph,
        node_features: Vec<f32>,
        n_train: usize,
    },
    VitMlp(VitClassifier),
}

impl PipelineModel {
    pub fn kind(&self) -> PipelineKind {
        match self {
            PipelineModel::VaeMlp { .. } => PipelineKind::VaeMlp,
            PipelineModel::VaeGnn { kind, .. } => *kind,
            PipelineModel::VitMlp(_) => PipelineKind::VitMlp,
        }
    }

    /// Predicted labels for standardized rows. Ties go to the smaller class.
    pub fn predict(&self, rows: &[f32]) -> Result<Vec<usize>, PipelineError> {
        match self {
            PipelineModel::VaeMlp { vae, head } => {
                let z = vae.embed(rows)?;
                Ok(head.predict_logits(&z)?.argmax_rows())
            }
            PipelineModel::VaeGnn { .. } => Err(PipelineError::TransductiveOnly),
            PipelineModel::VitMlp(m) => Ok(m.predict_logits(rows)?.argmax_rows()),
        }
    }

    /// Predicted labels for every node of the stored graph.
    pub fn predict_nodes(&self) -> Result<Vec<usize>, PipelineError> {
        match self {
            PipelineModel::VaeGnn {
                gnn,
                graph,
                node_features,
                ..
            } => Ok(gnn.predict_logits(graph, node_features)?.argmax_rows()),
            _ => Err(PipelineError::Config("model has no stored graph".into())),
        }
    }

    /// All parameters under one namespace per component.
    pub fn param_store(&self) -> Result<ParamStore, PipelineError> {
        let mut store = ParamStore::new();
        match self {
            PipelineModel::VaeMlp { vae, head } => {
                store.extend_prefixed("vae.", &vae.store)?;
                store.extend_prefixed("head.", &head.store)?;
            }
            PipelineModel::VaeGnn { vae, gnn, .. } => {
                store.extend_prefixed("vae.", &vae.store)?;
                store.extend_prefixed("gnn.", &gnn.store)?;
            }
            PipelineModel::VitMlp(m) => {
                store.extend_prefixed("vit.", &m.encoder.store)?;
                store.extend_prefixed("head.", &m.head.store)?;
            }
        }
        Ok(store)
    }
}

/// Metadata stored as `config.json` and inside the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub kind: PipelineKind,
    pub task: Task,
    pub n_features: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub meta: RunMeta,
    pub model: PipelineModel,
    pub report: EvalReport,
    /// Latent codes of train rows then test rows (VAE kinds).
    pub embeddings: Option<Vec<f32>>,
    pub log: Vec<String>,
}

struct StageClock {
    timings: BTreeMap<String, f64>,
    log: Vec<String>,
}

impl StageClock {
    fn new() -> Self {
        Self {
            timings: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        let secs = start.elapsed().as_secs_f64();
        log::info!("stage {stage} took {secs:.3}s");
        self.log.push(format!("{stage} wall_seconds {secs:.3}"));
        self.timings.insert(stage.to_string(), secs);
        out
    }

    fn epochs(&mut self, stage: &str, history: &[EpochStats]) {
        for e in history {
            let val = e.val_loss.map_or("-".to_string(), |v| format!("{v:.6}"));
            self.log.push(format!(
                "{stage} epoch {} train_loss {:.6} val_loss {val}",
                e.epoch, e.train_loss
            ));
        }
    }
}

fn vae_history(h: &[crate::vae::VaeEpochStats]) -> Vec<EpochStats> {
    h.iter()
        .map(|e| EpochStats {
            epoch: e.epoch,
            train_loss: e.train_loss,
            val_loss: e.val_loss,
        })
        .collect()
}

/// Trains one pipeline on prepared data and scores it on the test rows.
pub fn run_pipeline(
    kind: PipelineKind,
    data: &PreparedData,
    config: &PipelineConfig,
) -> Result<PipelineRun, PipelineError> {
    config.hyper.validate().map_err(PipelineError::Config)?;
    let task = data.task;
    let classes = task.classes();
    let mut clock = StageClock::new();
    let mut embeddings = None;
    let (model, test_pred) = match kind {
        PipelineKind::VitMlp => {
            let vit = config.vit_config();
            if vit.feature_count() != data.n_features {
                return Err(PipelineError::Config(format!(
                    "image of {}x{} does not hold {} features",
                    vit.image_rows, vit.image_cols, data.n_features
                )));
            }
            let (model, history) = clock.time("vit_mlp", || {
                train_vit_mlp(
                    &data.train_x,
                    &data.train_y,
                    vit,
                    config.mlp_hidden,
                    classes,
                )
            })?;
            clock.epochs("vit_mlp", &history);
            let model = PipelineModel::VitMlp(model);
            let pred = clock.time("predict", || model.predict(&data.test_x))?;
            (model, pred)
        }
        _ => {
            let (vae, history) = clock.time("vae", || {
                train_vae(&data.train_x, config.vae_config(data.n_features))
            })?;
            clock.epochs("vae", &vae_history(&history));
            let (z_train, z_test) = clock.time("embed", || -> Result<_, PipelineError> {
                Ok((vae.embed(&data.train_x)?, vae.embed(&data.test_x)?))
            })?;
            let latent = vae.config.latent_dim;
            embeddings = Some([z_train.as_slice(), z_test.as_slice()].concat());
            if kind == PipelineKind::VaeMlp {
                let dims = config.head_dims(latent, classes);
                let (head, history) = clock.time("mlp", || {
                    train_mlp_head(&z_train, &data.train_y, dims, &config.hyper)
                })?;
                clock.epochs("mlp", &history);
                let pred = clock
                    .time("predict", || head.predict_logits(&z_test))?
                    .argmax_rows();
                (PipelineModel::VaeMlp { vae, head }, pred)
            } else {
                let graph = clock.time("graph", || -> Result<Graph, PipelineError> {
                    let n = data.n_train() + data.n_test();
                    let g = if config.edgeless_graph {
                        Graph::edgeless(n)
                    } else {
                        assemble_transductive(&z_train, &z_test, latent, config.knn_k)?.graph
                    };
                    Ok(g.normalized())
                })?;
                let node_features = embeddings.clone().expect("set above");
                let gnn_config = config.gnn_config(kind, latent, classes);
                let stage = if kind == PipelineKind::VaeGcn {
                    "gcn"
                } else {
                    "gat"
                };
                let (gnn, history) = clock.time(stage, || {
                    train_gnn(
                        &graph,
                        &node_features,
                        &data.train_y,
                        gnn_config,
                        &config.hyper,
                    )
                })?;
                clock.epochs(stage, &history);
                let model = PipelineModel::VaeGnn {
                    kind,
                    vae,
                    gnn,
                    graph,
                    node_features,
                    n_train: data.n_train(),
                };
                let nodes = clock.time("predict", || model.predict_nodes())?;
                (model, nodes[data.n_train()..].to_vec())
            }
        }
    };
    let mut report = EvalReport::evaluate(
        task.as_str(),
        kind.as_str(),
        &data.test_y,
        &test_pred,
        &task.class_names(),
    )?;
    report.timings = clock.timings;
    Ok(PipelineRun {
        meta: RunMeta {
            kind,
            task,
            n_features: data.n_features,
            n_train: data.n_train(),
            n_test: data.n_test(),
            config: config.clone(),
        },
        model,
        report,
        embeddings,
        log: clock.log,
    })
}

pub fn encode_embeddings(values: &[f32], width: usize) -> Vec<u8> {
    let n = values.len().checked_div(width).unwrap_or(0);
    let mut out = Vec::with_capacity(17 + 4 * values.len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Returns `(values, width)`.
pub fn decode_embeddings(bytes: &[u8]) -> Result<(Vec<f32>, usize), PipelineError> {
    let bad = |m: &str| PipelineError::Run(format!("embeddings file: {m}"));
    if bytes.len() < 17 || &bytes[..5] != EMBEDDING_MAGIC {
        return Err(bad("bad header"));
    }
    let n = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let width = u32::from_le_bytes(bytes[13..17].try_into().expect("4 bytes")) as usize;
    let body = &bytes[17..];
    if body.len() != 4 * n * width {
        return Err(bad("length does not match header"));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((values, width))
}

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.nbck";
pub const EMBEDDINGS_FILE: &str = "embeddings.nbem";
pub const GRAPH_FILE: &str = "graph.nbgr";
pub const REPORT_FILE: &str = "report.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const LOG_FILE: &str = "log.txt";
pub const TIMINGS_FILE: &str = "timings.json";

/// Writes every artifact of a run. `report.json` carries no timings so that
/// reruns compare byte for byte; those go to `timings.json`.
pub fn write_run_dir(run: &PipelineRun, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    let meta = serde_json::to_value(&run.meta)?;
    fs::write(
        dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    write_checkpoint(&dir.join(CHECKPOINT_FILE), &meta, &run.model.param_store()?)?;
    if let Some(z) = &run.embeddings {
        let width = match &run.model {
            PipelineModel::VaeMlp { vae, .. } | PipelineModel::VaeGnn { vae, .. } => {
                vae.config.latent_dim
            }
            PipelineModel::VitMlp(_) => unreachable!("no embeddings for ViT"),
        };
        fs::write(dir.join(EMBEDDINGS_FILE), encode_embeddings(z, width))?;
    }
    if let PipelineModel::VaeGnn { graph, .. } = &run.model {
        graph.write(&dir.join(GRAPH_FILE))?;
    }
    fs::write(
        dir.join(REPORT_FILE),
        run.report.without_timings().to_json(),
    )?;
    fs::write(
        dir.join(CONFUSION_FILE),
        run.report
            .confusion_matrix()
            .to_csv(&run.report.class_names()),
    )?;
    fs::write(dir.join(LOG_FILE), run.log.join("\n") + "\n")?;
    fs::write(
        dir.join(TIMINGS_FILE),
        serde_json::to_string_pretty(&run.report.timings)? + "\n",
    )?;
    Ok(())
}

/// Rebuilds the trained model of a run directory.
pub fn load_run(dir: &Path) -> Result<(RunMeta, PipelineModel), PipelineError> {
    let ckpt = read_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let meta: RunMeta = serde_json::from_value(ckpt.config)?;
    let store = ckpt.store;
    let cfg = &meta.config;
    let classes = meta.task.classes();
    let vae = || -> Result<VaeModel, PipelineError> {
        Ok(VaeModel::from_store(
            cfg.vae_config(meta.n_features),
            store.sub_store("vae."),
        )?)
    };
    let model = match meta.kind {
        PipelineKind::VaeMlp => {
            let vae = vae()?;
            let dims = cfg.head_dims(vae.config.latent_dim, classes);
            let head = MlpHead {
                dims,
                store: store.sub_store("head."),
            };
            PipelineModel::VaeMlp { vae, head }
        }
        PipelineKind::VitMlp => {
            let encoder = VitModel::from_store(cfg.vit_config(), store.sub_store("vit."))?;
            let dims = vec![encoder.config.output_dim, cfg.mlp_hidden, classes];
            let head = MlpHead {
                dims,
                store: store.sub_store("head."),
            };
            PipelineModel::VitMlp(VitClassifier { encoder, head })
        }
        kind => {
            let vae = vae()?;
            let latent = vae.config.latent_dim;
            let gnn = GnnModel::from_store(
                cfg.gnn_config(kind, latent, classes),
                store.sub_store("gnn."),
            )?;
            let graph = Graph::read(&dir.join(GRAPH_FILE))?;
            let (node_features, width) = decode_embeddings(&fs::read(dir.join(EMBEDDINGS_FILE))?)?;
            if width != latent || graph.n != meta.n_train + meta.n_test {
                return Err(PipelineError::Run("graph and embeddings disagree".into()));
            }
            PipelineModel::VaeGnn {
                kind,
                vae,
                gnn,
                graph,
                node_features,
                n_train: meta.n_train,
            }
        }
    };
    Ok((meta, model))
}

/// Scores a stored model on the test rows of `data`, which must be prepared
/// the same way as for training.
pub fn evaluate_model(
    meta: &RunMeta,
    model: &PipelineModel,
    data: &PreparedData,
) -> Result<EvalReport, PipelineError> {
    if data.n_test() != meta.n_test || data.n_features != meta.n_features {
        return Err(PipelineError::Run(format!(
            "data has {} test rows of {} features, run expects {} of {}",
            data.n_test(),
            data.n_features,
            meta.n_test,
            meta.n_features
        )));
    }
    let pred = match model {
        PipelineModel::VaeGnn { n_train, .. } => model.predict_nodes()?[*n_train..].to_vec(),
        _ => model.predict(&data.test_x)?,
    };
    Ok(EvalReport::evaluate(
        meta.task.as_str(),
        meta.kind.as_str(),
        &data.test_y,
        &pred,
        &meta.task.class_names(),
    )?)
}
