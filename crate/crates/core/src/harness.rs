//! Training loop, ablation runner, config sweep, checkpointing and
//! deterministic seeding.
//!
//! Every run is bit-reproducible on one platform given (seed, config,
//! dataset): parameter init, epoch shuffling and dropout all draw from
//! ChaCha streams derived from the config seed, and no step is threaded.
//! Set the environment variable `ORDSEV_DETERMINISM=0` to replace the
//! config seed with OS entropy for exploratory runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DropoutState, Tape};
use crate::corpus::{pad_and_mask, stratified_split, Post};
use crate::embeddings::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::fusion::{ordinal_loss_from_logits, soft_labels, CrossMode};
use crate::kg::{retrieve_subgraph, CosineMeanEmbedding, Mhkg};
use crate::kg_encoder::PreparedGraph;
use crate::metrics::{graded_counts, graded_prf, GradedCounts};
use crate::model::{Ablation, Model, ParamStore};

/// All hyperparameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub class_count: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub hidden: usize,
    pub uni_heads: usize,
    pub bi_heads: usize,
    pub lstm_layers: usize,
    pub gnn_layers: usize,
    pub beta: f64,
    pub max_len: usize,
    pub top_k: usize,
    pub cross_mode: CrossMode,
    pub ablation: Ablation,
    pub seed: u64,
    /// Add reverse edges when preparing retrieved subgraphs.
    pub undirected_kg: bool,
    /// Stop training once validation GF reaches this value.
    pub early_stop_gf: Option<f64>,
}

impl Default for ModelConfig {
    /// Four-class defaults: learning rate 5.4e-5, 200 epochs, 2 unigram and
    /// 4 bigram attention heads, dropout 0.3, batch 128, penalty scale 4.5,
    /// hidden 128, 2 LSTM layers, 1 GNN layer, max length 256.
    fn default() -> Self {
        Self {
            class_count: 4,
            learning_rate: 5.4e-5,
            epochs: 200,
            batch_size: 128,
            dropout: 0.3,
            hidden: 128,
            uni_heads: 2,
            bi_heads: 4,
            lstm_layers: 2,
            gnn_layers: 1,
            beta: 4.5,
            max_len: 256,
            top_k: 3,
            cross_mode: CrossMode::GatedBigramValues,
            ablation: Ablation::A5,
            seed: 42,
            undirected_kg: false,
            early_stop_gf: None,
        }
    }
}

impl ModelConfig {
    /// Tuned defaults per class count: the three-class setting uses learning
    /// rate 9.8e-5, 4 unigram heads and 3 GNN layers.
    pub fn for_classes(class_count: usize) -> Self {
        let mut config = Self::default();
        config.class_count = class_count;
        if class_count == 3 {
            config.learning_rate = 9.8e-5;
            config.uni_heads = 4;
            config.gnn_layers = 3;
        }
        config
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(2..=4).contains(&self.class_count) {
            return fail(format!("class_count must be in [2, 4], got {}", self.class_count));
        }
        if self.hidden < 2 || self.hidden % 2 != 0 {
            return fail(format!("hidden must be even and >= 2, got {}", self.hidden));
        }
        if self.uni_heads == 0 || self.hidden % self.uni_heads != 0 {
            return fail(format!(
                "hidden {} must be divisible by uni_heads {}",
                self.hidden, self.uni_heads
            ));
        }
        if self.bi_heads == 0 || self.hidden % self.bi_heads != 0 {
            return fail(format!(
                "hidden {} must be divisible by bi_heads {}",
                self.hidden, self.bi_heads
            ));
        }
        if self.lstm_layers == 0 {
            return fail("lstm_layers must be >= 1".into());
        }
        if self.gnn_layers == 0 {
            return fail("gnn_layers must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.beta < 0.0 {
            return fail(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.max_len < 2 {
            return fail(format!("max_len must be >= 2, got {}", self.max_len));
        }
        if self.top_k == 0 {
            return fail("top_k must be >= 1".into());
        }
        Ok(())
    }

    /// Seed actually used by a run: the config seed, unless determinism is
    /// disabled via `ORDSEV_DETERMINISM=0`.
    pub fn effective_seed(&self) -> u64 {
        match std::env::var("ORDSEV_DETERMINISM") {
            Ok(v) if v == "0" => rand::random(),
            _ => self.seed,
        }
    }

    /// Stable 64-bit hash of the canonical JSON serialization, used as a
    /// deterministic tiebreak when ordering runs.
    pub fn stable_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::embeddings::stable_hash(&json)
    }
}

/// Graded evaluation of one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub counts: GradedCounts,
    pub gp: f64,
    pub gr: f64,
    pub gf: f64,
}

/// Everything produced by one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ModelConfig,
    /// Mean training loss per epoch.
    pub loss_series: Vec<f64>,
    pub train_eval: SplitEval,
    pub val_eval: SplitEval,
    pub test_eval: SplitEval,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub param_count: usize,
    pub wall_secs: f64,
    /// Time spent retrieving per-post subgraphs; absent when the variant
    /// has the knowledge graph disabled.
    pub kg_retrieval_secs: Option<f64>,
    pub checkpoint_path: Option<PathBuf>,
}

/// A labeled post lowered to model inputs.
pub struct PreparedPost {
    pub id: String,
    pub label: usize,
    pub tokens: Vec<String>,
    pub emb: Array2<f64>,
    pub graph: Option<PreparedGraph>,
}

/// Embed every post and, for knowledge-graph variants, retrieve and prepare
/// its subgraph. Returns the prepared posts and retrieval wall time.
pub fn prepare_posts(
    posts: &[Post],
    provider: &EmbeddingProvider,
    kg: Option<&Mhkg>,
    config: &ModelConfig,
) -> Result<(Vec<PreparedPost>, Option<f64>)> {
    let uses_kg = config.ablation.uses_kg();
    if uses_kg && kg.is_none() {
        return Err(Error::Config(format!(
            "variant {:?} needs a knowledge graph",
            config.ablation
        )));
    }
    let sim = kg.map(|_| CosineMeanEmbedding::new(provider));
    let mut out = Vec::with_capacity(posts.len());
    let mut retrieval_secs = 0.0;
    for post in posts {
        let label = post.label.ok_or_else(|| {
            Error::Config(format!("post {} has no label", post.id))
        })?;
        let emb = provider.embed_sequence(&post.tokens)?;
        let graph = if uses_kg {
            let kg = kg.expect("checked above");
            let sim = sim.as_ref().expect("built with kg");
            let started = Instant::now();
            let triplets = retrieve_subgraph(post, kg, config.top_k, sim)?;
            retrieval_secs += started.elapsed().as_secs_f64();
            let sub = crate::kg::build_graph(&triplets, provider);
            Some(PreparedGraph::from_mhkg(&sub, config.undirected_kg))
        } else {
            None
        };
        out.push(PreparedPost {
            id: post.id.clone(),
            label,
            tokens: post.tokens.clone(),
            emb,
            graph,
        });
    }
    Ok((out, uses_kg.then_some(retrieval_secs)))
}

/// Adam with canonical moment defaults (0.9 / 0.999 / 1e-8).
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let m = store.values().map(|(_, v)| Array2::zeros(v.raw_dim())).collect();
        let v = store.values().map(|(_, v)| Array2::zeros(v.raw_dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Array2<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            self.m[i] = &self.m[i] * self.beta1 + &(g * (1.0 - self.beta1));
            self.v[i] = &self.v[i] * self.beta2 + &(g.mapv(|x| x * x) * (1.0 - self.beta2));
            let m_hat = &self.m[i] / bc1;
            let v_hat = &self.v[i] / bc2;
            let update = m_hat / (v_hat.mapv(f64::sqrt) + self.eps) * self.lr;
            let current = store.value_at(i).clone();
            store.assign_at(i, current - update);
        }
    }
}

fn padded_input(post: &PreparedPost, max_len: usize, len: usize) -> Result<(Array2<f64>, Vec<bool>)> {
    let target = len.clamp(2, max_len);
    let batch = pad_and_mask(std::slice::from_ref(&post.emb), target)?;
    Ok((batch.post_embeddings(0), batch.post_mask(0)))
}

/// Evaluate a model over prepared posts with graded metrics.
pub fn evaluate_model(model: &Model, posts: &[PreparedPost]) -> Result<SplitEval> {
    let mut preds = Vec::with_capacity(posts.len());
    let mut actuals = Vec::with_capacity(posts.len());
    for post in posts {
        let (emb, mask) = padded_input(post, model.config.max_len, post.emb.nrows())?;
        let (_, class, _) = model.predict(&emb, &mask, post.graph.as_ref())?;
        preds.push(class);
        actuals.push(post.label);
    }
    let counts = graded_counts(&preds, &actuals)?;
    let (gp, gr, gf) = graded_prf(&counts);
    Ok(SplitEval { counts, gp, gr, gf })
}

fn derive_seed(seed: u64, tag: &str) -> u64 {
    seed ^ crate::embeddings::stable_hash(tag)
}

/// Train one configuration and return the best-epoch model together with
/// its report. Splits the dataset 70/15/15 stratified by label with the
/// config seed, optimizes the ordinal soft-label loss with Adam, and keeps
/// the parameters of the best validation-GF epoch.
pub fn train_with_model(
    config: &ModelConfig,
    posts: &[Post],
    provider: &EmbeddingProvider,
    kg: Option<&Mhkg>,
) -> Result<(Model, TrainReport)> {
    let started = Instant::now();
    config.validate()?;
    let seed = config.effective_seed();
    let (train_posts, val_posts, test_posts) = stratified_split(posts, (0.7, 0.15, 0.15), seed)?;
    {
        let mut classes: Vec<usize> = train_posts.iter().filter_map(|p| p.label).collect();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() != config.class_count {
            return Err(Error::Config(format!(
                "train split covers {} of {} classes",
                classes.len(),
                config.class_count
            )));
        }
    }

    let (train_prep, retrieval_train) = prepare_posts(&train_posts, provider, kg, config)?;
    let (val_prep, retrieval_val) = prepare_posts(&val_posts, provider, kg, config)?;
    let (test_prep, retrieval_test) = prepare_posts(&test_posts, provider, kg, config)?;
    let kg_retrieval_secs = match (retrieval_train, retrieval_val, retrieval_test) {
        (Some(a), Some(b), Some(c)) => Some(a + b + c),
        _ => None,
    };

    let mut model = Model::new(ModelConfig { seed, ..config.clone() })?;
    let soft: Vec<_> = (0..config.class_count)
        .map(|y| soft_labels(y, config.beta, config.class_count))
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(config.learning_rate, &model.store);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dropout"));

    let mut loss_series = Vec::with_capacity(config.epochs);
    let mut best: (f64, usize, ParamStore) = (f64::NEG_INFINITY, 0, model.store.clone());
    let mut order: Vec<usize> = (0..train_prep.len()).collect();

    let initial_val = evaluate_model(&model, &val_prep)?;
    if initial_val.gf > best.0 {
        best = (initial_val.gf, 0, model.store.clone());
    }

    let mut epochs_run = 0;
    for epoch in 0..config.epochs {
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("shuffle-{epoch}")));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let batch_len: usize = batch
                .iter()
                .map(|&i| train_prep[i].emb.nrows())
                .max()
                .unwrap_or(2);
            let mut grad_acc: Vec<Array2<f64>> = model
                .store
                .values()
                .map(|(_, v)| Array2::zeros(v.raw_dim()))
                .collect();
            for &i in batch {
                let post = &train_prep[i];
                let (emb, mask) = padded_input(post, config.max_len, batch_len)?;
                let mut tape = Tape::new();
                let leaves = model.store.leaves(&mut tape);
                let mut dropout = Some(DropoutState {
                    rng: &mut dropout_rng,
                    rate: config.dropout,
                });
                let pass = model.forward(
                    &mut tape,
                    &leaves,
                    &emb,
                    &mask,
                    post.graph.as_ref(),
                    &mut dropout,
                )?;
                let loss = ordinal_loss_from_logits(&mut tape, pass.logits, &soft[post.label]);
                epoch_loss += tape.value(loss)[[0, 0]];
                tape.backward(loss);
                for (acc, &leaf) in grad_acc.iter_mut().zip(leaves.all()) {
                    *acc += &tape.grad(leaf);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grad_acc {
                *g *= inv;
            }
            adam.step(&mut model.store, &grad_acc);
        }
        let epoch_loss = epoch_loss / train_prep.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: epoch_loss,
            });
        }
        loss_series.push(epoch_loss);
        epochs_run = epoch + 1;

        // Ties go to the later epoch: attention keeps sharpening after the
        // validation score saturates.
        let val_eval = evaluate_model(&model, &val_prep)?;
        if val_eval.gf >= best.0 {
            best = (val_eval.gf, epochs_run, model.store.clone());
        }
        if let Some(target) = config.early_stop_gf {
            if val_eval.gf >= target {
                break;
            }
        }
    }

    model.store = best.2;
    let train_eval = evaluate_model(&model, &train_prep)?;
    let val_eval = evaluate_model(&model, &val_prep)?;
    let test_eval = evaluate_model(&model, &test_prep)?;

    let report = TrainReport {
        config: config.clone(),
        loss_series,
        train_eval,
        val_eval,
        test_eval,
        best_epoch: best.1,
        epochs_run,
        param_count: model.store.scalar_count(),
        wall_secs: started.elapsed().as_secs_f64(),
        kg_retrieval_secs,
        checkpoint_path: None,
    };
    Ok((model, report))
}

/// Train one configuration; see [`train_with_model`].
pub fn train(
    config: &ModelConfig,
    posts: &[Post],
    provider: &EmbeddingProvider,
    kg: Option<&Mhkg>,
) -> Result<TrainReport> {
    train_with_model(config, posts, provider, kg).map(|(_, report)| report)
}

/// Train and also write `checkpoint.json` and `report.json` under `out_dir`.
pub fn train_to_dir(
    config: &ModelConfig,
    posts: &[Post],
    provider: &EmbeddingProvider,
    kg: Option<&Mhkg>,
    out_dir: &Path,
) -> Result<TrainReport> {
    std::fs::create_dir_all(out_dir)?;
    let (model, mut report) = train_with_model(config, posts, provider, kg)?;
    let checkpoint = out_dir.join("checkpoint.json");
    save_checkpoint(&model, &checkpoint)?;
    report.checkpoint_path = Some(checkpoint);
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// One row of an ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub label: String,
    pub report: std::result::Result<TrainReport, String>,
}

/// Ablation results for all six variants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Markdown table mirroring the usual GF/GP/GR layout.
    pub fn markdown(&self) -> String {
        let mut out = String::from("| Config | GF | GP | GR | Params | KG retrieval (s) |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for row in &self.rows {
            match &row.report {
                Ok(r) => {
                    let kg = r
                        .kg_retrieval_secs
                        .map(|s| format!("{s:.3}"))
                        .unwrap_or_else(|| "-".into());
                    out.push_str(&format!(
                        "| {:?}: {} | {:.4} | {:.4} | {:.4} | {} | {} |\n",
                        row.variant,
                        row.label,
                        r.test_eval.gf,
                        r.test_eval.gp,
                        r.test_eval.gr,
                        r.param_count,
                        kg
                    ));
                }
                Err(e) => {
                    out.push_str(&format!(
                        "| {:?}: {} | failed: {e} | | | | |\n",
                        row.variant, row.label
                    ));
                }
            }
        }
        out
    }
}

/// Run all six variants with the shared seed and data splits. Per-variant
/// failures are recorded and the remaining variants still run.
pub fn ablate(
    base_config: &ModelConfig,
    posts: &[Post],
    provider: &EmbeddingProvider,
    kg: Option<&Mhkg>,
) -> AblationReport {
    let rows = Ablation::ALL
        .iter()
        .map(|&variant| {
            let config = ModelConfig {
                ablation: variant,
                ..base_config.clone()
            };
            let report = train(&config, posts, provider, kg).map_err(|e| e.to_string());
            AblationRow {
                variant,
                label: variant.label().to_string(),
                report,
            }
        })
        .collect();
    AblationReport { rows }
}

/// Run every configuration in the grid on the same dataset and sort the
/// reports by validation GF descending, ties broken by config hash
/// ascending.
pub fn sweep(
    grid: &[ModelConfig],
    posts: &[Post],
    provider: &EmbeddingProvider,
    kg: Option<&Mhkg>,
) -> Result<Vec<TrainReport>> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut reports: Vec<TrainReport> = grid
        .iter()
        .map(|config| train(config, posts, provider, kg))
        .collect::<Result<_>>()?;
    reports.sort_by(|a, b| {
        b.val_eval
            .gf
            .partial_cmp(&a.val_eval.gf)
            .expect("GF is finite")
            .then_with(|| a.config.stable_hash().cmp(&b.config.stable_hash()))
    });
    Ok(reports)
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema: u32,
    config: ModelConfig,
    params: Vec<CheckpointParam>,
}

/// Persist a model (config + parameters) as JSON. Values survive a round
/// trip bit for bit.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let params = model
        .store
        .values()
        .map(|(name, v)| CheckpointParam {
            name: name.to_string(),
            rows: v.nrows(),
            cols: v.ncols(),
            data: v.iter().cloned().collect(),
        })
        .collect();
    let file = CheckpointFile {
        schema: 1,
        config: model.config.clone(),
        params,
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.schema != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint schema {}",
            file.schema
        )));
    }
    let mut model = Model::new(file.config)?;
    let expected: Vec<String> = model.store.names().map(String::from).collect();
    let got: Vec<&str> = file.params.iter().map(|p| p.name.as_str()).collect();
    if expected.len() != got.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model needs {}",
            got.len(),
            expected.len()
        )));
    }
    for p in file.params {
        let arr = Array2::from_shape_vec((p.rows, p.cols), p.data)
            .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", p.name)))?;
        model.store.set(&p.name, arr)?;
    }
    Ok(model)
}

/// Evaluate a checkpointed model on a labeled dataset.
pub fn evaluate_dataset(
    model: &Model,
    posts: &[Post],
    provider: &EmbeddingProvider,
    kg: Option<&Mhkg>,
) -> Result<SplitEval> {
    let (prepared, _) = prepare_posts(posts, provider, kg, &model.config)?;
    evaluate_model(model, &prepared)
}
