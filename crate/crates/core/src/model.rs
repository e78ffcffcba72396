//! The assembled forward pipeline for the six ablation variants.
//!
//! Variant wiring, with `H'` the attended unigram matrix, `B` the bigram
//! convolution output, and `G` the encoded graph nodes:
//!
//! - `A0`: pool(H')
//! - `A1`: pool(H') ++ mean(G)
//! - `A2`: pool(cross(H', G))
//! - `A3`: pool(B)
//! - `A4`: pool(B) ++ mean(G)
//! - `A5`: pool(cross(B, G))
//!
//! Pooling is always masked mean pooling over the stream's own validity
//! mask; `++` is vector concatenation before the classifier.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{apply_dropout, DropoutState, Tape, Var};
use crate::embeddings::EMBED_DIM;
use crate::encoder::{
    bigram_conv, bilstm_encode, unigram_attention, BiLstmVars, BigramConvVars, LstmDirVars,
    MultiHeadVars,
};
use crate::error::{Error, Result};
use crate::fusion::{cross_attention, ClassifierVars, CrossAttnVars};
use crate::harness::ModelConfig;
use crate::kg_encoder::{encode_kg, GineLayerVars, GineVars, PreparedGraph};

/// The six architecture subsets, from unigrams-only to the full
/// cross-attention model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Ablation {
    A0,
    A1,
    A2,
    A3,
    A4,
    #[default]
    A5,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::A0,
        Ablation::A1,
        Ablation::A2,
        Ablation::A3,
        Ablation::A4,
        Ablation::A5,
    ];

    pub fn uses_kg(self) -> bool {
        matches!(self, Ablation::A1 | Ablation::A2 | Ablation::A4 | Ablation::A5)
    }

    pub fn uses_bigrams(self) -> bool {
        matches!(self, Ablation::A3 | Ablation::A4 | Ablation::A5)
    }

    pub fn uses_cross_attention(self) -> bool {
        matches!(self, Ablation::A2 | Ablation::A5)
    }

    fn uses_concat_kg(self) -> bool {
        matches!(self, Ablation::A1 | Ablation::A4)
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::A0 => "unigrams only",
            Ablation::A1 => "unigrams + kg (concat)",
            Ablation::A2 => "unigrams + kg (cross att.)",
            Ablation::A3 => "unigrams + bigrams",
            Ablation::A4 => "unigrams + bigrams + kg (concat)",
            Ablation::A5 => "full: unigrams + bigrams + kg (cross att.)",
        }
    }
}

/// Named parameter tensors in fixed insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Array2<f64>)>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.entries[i].1.raw_dim() != value.raw_dim() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.entries[i].1.dim(),
                value.dim()
            )));
        }
        self.entries[i].1 = value;
        Ok(())
    }

    pub fn values(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn value_at(&self, i: usize) -> &Array2<f64> {
        &self.entries[i].1
    }

    pub fn assign_at(&mut self, i: usize, value: Array2<f64>) {
        self.entries[i].1 = value;
    }

    /// Register every parameter as a leaf on a fresh tape, in store order.
    pub fn leaves(&self, tape: &mut Tape) -> ParamLeaves {
        let vars: Vec<Var> = self
            .entries
            .iter()
            .map(|(_, v)| tape.leaf(v.clone()))
            .collect();
        ParamLeaves {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Tape handles for every parameter of one forward pass.
pub struct ParamLeaves {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl ParamLeaves {
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() * 2.0 * limit - limit)
}

/// L2-normalize each feature row and rescale to unit per-coordinate
/// variance (`||row|| = sqrt(dim)`). Subword-averaged embeddings shrink
/// with the n-gram count of the word; without this the encoder runs in a
/// vanishing-signal regime where attention softmax stays pinned at uniform.
/// Zero rows (padding, sentinel nodes) stay exactly zero.
pub fn scale_features(x: &Array2<f64>) -> Array2<f64> {
    let target = (x.ncols() as f64).sqrt();
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            let gain = target / norm;
            row.mapv_inplace(|v| v * gain);
        }
    }
    out
}

/// Everything retained from one forward pass for the explanation module.
pub struct ForwardArtifacts {
    /// Per-head unigram attention, `(L, L)`, invalid query rows zeroed.
    pub uni_attention: Vec<Array2<f64>>,
    /// Per-head cross-attention score matrices (rows = query stream).
    pub cross_scores: Vec<Array2<f64>>,
    /// Per-head cross-attention gates (rows = query stream).
    pub cross_gates: Vec<Array2<f64>>,
    pub token_mask: Vec<bool>,
    pub bigram_mask: Vec<bool>,
    pub kg_nodes: Vec<String>,
    /// Tape handle of the attended unigram matrix, for gradient-based
    /// saliency.
    pub attended_unigrams: Var,
}

/// One forward result: logits (1, C) plus retained artifacts.
pub struct ForwardPass {
    pub logits: Var,
    pub artifacts: ForwardArtifacts,
}

/// A configured variant with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    /// Validate the configuration and initialize all parameters the variant
    /// needs. Dimension inconsistencies fail here, not at the first batch.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut store = ParamStore::default();

        let half = d / 2;
        for layer in 0..config.lstm_layers {
            let in_dim = if layer == 0 { EMBED_DIM } else { d };
            for dir in ["fwd", "bwd"] {
                store.insert(
                    format!("lstm.{layer}.{dir}.w_x"),
                    glorot(&mut rng, in_dim, 4 * half),
                );
                store.insert(
                    format!("lstm.{layer}.{dir}.w_h"),
                    glorot(&mut rng, half, 4 * half),
                );
                store.insert(format!("lstm.{layer}.{dir}.b"), Array2::zeros((1, 4 * half)));
            }
        }

        let dk_u = d / config.uni_heads;
        for k in 0..config.uni_heads {
            store.insert(format!("attn.head{k}.q"), glorot(&mut rng, d, dk_u));
            store.insert(format!("attn.head{k}.k"), glorot(&mut rng, d, dk_u));
            store.insert(format!("attn.head{k}.v"), glorot(&mut rng, d, dk_u));
        }
        store.insert("attn.w_o", glorot(&mut rng, d, d));

        if config.ablation.uses_bigrams() {
            store.insert("bigram.w", glorot(&mut rng, 2 * d, d));
            store.insert("bigram.b", Array2::zeros((1, d)));
        }

        if config.ablation.uses_kg() {
            store.insert("gine.proj.w", glorot(&mut rng, EMBED_DIM, d));
            store.insert("gine.proj.b", Array2::zeros((1, d)));
            for l in 0..config.gnn_layers {
                store.insert(format!("gine.layer{l}.eps"), Array2::zeros((1, 1)));
                store.insert(format!("gine.layer{l}.w1"), glorot(&mut rng, d, d));
                store.insert(format!("gine.layer{l}.b1"), Array2::zeros((1, d)));
                store.insert(format!("gine.layer{l}.w2"), glorot(&mut rng, d, d));
                store.insert(format!("gine.layer{l}.b2"), Array2::zeros((1, d)));
            }
        }

        if config.ablation.uses_cross_attention() {
            let dk_b = d / config.bi_heads;
            for k in 0..config.bi_heads {
                store.insert(format!("cross.head{k}.q"), glorot(&mut rng, d, dk_b));
                store.insert(format!("cross.head{k}.k"), glorot(&mut rng, d, dk_b));
                store.insert(format!("cross.head{k}.v"), glorot(&mut rng, d, dk_b));
            }
            store.insert("cross.w_o", glorot(&mut rng, d, d));
        }

        let cls_in = if config.ablation.uses_concat_kg() { 2 * d } else { d };
        store.insert("cls.w1", glorot(&mut rng, cls_in, d));
        store.insert("cls.b1", Array2::zeros((1, d)));
        store.insert("cls.w2", glorot(&mut rng, d, config.class_count));
        store.insert("cls.b2", Array2::zeros((1, config.class_count)));

        Ok(Self { config, store })
    }

    fn bilstm_vars(&self, leaves: &ParamLeaves) -> BiLstmVars {
        BiLstmVars {
            layers: (0..self.config.lstm_layers)
                .map(|l| {
                    let dir = |name: &str| LstmDirVars {
                        w_x: leaves.var(&format!("lstm.{l}.{name}.w_x")),
                        w_h: leaves.var(&format!("lstm.{l}.{name}.w_h")),
                        b: leaves.var(&format!("lstm.{l}.{name}.b")),
                        hidden: self.config.hidden / 2,
                    };
                    (dir("fwd"), dir("bwd"))
                })
                .collect(),
        }
    }

    fn attn_vars(&self, leaves: &ParamLeaves) -> MultiHeadVars {
        MultiHeadVars {
            w_q: (0..self.config.uni_heads)
                .map(|k| leaves.var(&format!("attn.head{k}.q")))
                .collect(),
            w_k: (0..self.config.uni_heads)
                .map(|k| leaves.var(&format!("attn.head{k}.k")))
                .collect(),
            w_v: (0..self.config.uni_heads)
                .map(|k| leaves.var(&format!("attn.head{k}.v")))
                .collect(),
            w_o: leaves.var("attn.w_o"),
        }
    }

    fn cross_vars(&self, leaves: &ParamLeaves) -> CrossAttnVars {
        CrossAttnVars {
            q: (0..self.config.bi_heads)
                .map(|k| leaves.var(&format!("cross.head{k}.q")))
                .collect(),
            k: (0..self.config.bi_heads)
                .map(|k| leaves.var(&format!("cross.head{k}.k")))
                .collect(),
            v: (0..self.config.bi_heads)
                .map(|k| leaves.var(&format!("cross.head{k}.v")))
                .collect(),
            out: leaves.var("cross.w_o"),
        }
    }

    fn gine_vars(&self, leaves: &ParamLeaves) -> GineVars {
        GineVars {
            proj_w: leaves.var("gine.proj.w"),
            proj_b: leaves.var("gine.proj.b"),
            layers: (0..self.config.gnn_layers)
                .map(|l| GineLayerVars {
                    epsilon: leaves.var(&format!("gine.layer{l}.eps")),
                    w1: leaves.var(&format!("gine.layer{l}.w1")),
                    b1: leaves.var(&format!("gine.layer{l}.b1")),
                    w2: leaves.var(&format!("gine.layer{l}.w2")),
                    b2: leaves.var(&format!("gine.layer{l}.b2")),
                })
                .collect(),
        }
    }

    fn classifier_vars(&self, leaves: &ParamLeaves) -> ClassifierVars {
        ClassifierVars {
            w1: leaves.var("cls.w1"),
            b1: leaves.var("cls.b1"),
            w2: leaves.var("cls.w2"),
            b2: leaves.var("cls.b2"),
        }
    }

    /// Run one post through the variant pipeline.
    ///
    /// `emb` is the `(L, 300)` padded embedding matrix with its validity
    /// `mask`; `graph` must be provided exactly when the variant uses the
    /// knowledge graph.
    pub fn forward(
        &self,
        tape: &mut Tape,
        leaves: &ParamLeaves,
        emb: &Array2<f64>,
        mask: &[bool],
        graph: Option<&PreparedGraph>,
        dropout: &mut Option<DropoutState>,
    ) -> Result<ForwardPass> {
        let ablation = self.config.ablation;
        if ablation.uses_kg() && graph.is_none() {
            return Err(Error::Config(format!(
                "variant {ablation:?} needs a retrieved subgraph"
            )));
        }

        let input = tape.leaf(scale_features(emb));
        let lstm = self.bilstm_vars(leaves);
        let contextual = bilstm_encode(tape, input, mask, &lstm)?;
        let attn = self.attn_vars(leaves);
        let attended = unigram_attention(tape, contextual, mask, &attn)?;
        let unigrams = apply_dropout(tape, attended.out, dropout);

        let (graph_nodes, kg_names) = if ablation.uses_kg() {
            let prepared = graph.expect("checked above");
            let gine = self.gine_vars(leaves);
            let nodes = encode_kg(tape, prepared, &gine, dropout)?;
            (Some(nodes), prepared.node_names.clone())
        } else {
            (None, Vec::new())
        };

        let mut cross_scores = Vec::new();
        let mut cross_gates = Vec::new();
        let mut bigram_mask = Vec::new();

        let pooled_text = match ablation {
            Ablation::A0 | Ablation::A1 => tape.mean_rows_masked(unigrams, mask)?,
            Ablation::A2 => {
                let out = cross_attention(
                    tape,
                    unigrams,
                    mask,
                    graph_nodes.expect("A2 uses kg"),
                    &self.cross_vars(leaves),
                    self.config.cross_mode,
                )?;
                cross_scores = out.scores;
                cross_gates = out.gates;
                let fused = apply_dropout(tape, out.out, dropout);
                let fused = tape.zero_rows(fused, mask);
                tape.mean_rows_masked(fused, mask)?
            }
            Ablation::A3 | Ablation::A4 => {
                let conv = BigramConvVars {
                    w: leaves.var("bigram.w"),
                    b: leaves.var("bigram.b"),
                };
                let (bigrams, bmask) = bigram_conv(tape, unigrams, mask, &conv)?;
                bigram_mask = bmask;
                tape.mean_rows_masked(bigrams, &bigram_mask)?
            }
            Ablation::A5 => {
                let conv = BigramConvVars {
                    w: leaves.var("bigram.w"),
                    b: leaves.var("bigram.b"),
                };
                let (bigrams, bmask) = bigram_conv(tape, unigrams, mask, &conv)?;
                bigram_mask = bmask;
                let out = cross_attention(
                    tape,
                    bigrams,
                    &bigram_mask,
                    graph_nodes.expect("A5 uses kg"),
                    &self.cross_vars(leaves),
                    self.config.cross_mode,
                )?;
                cross_scores = out.scores;
                cross_gates = out.gates;
                let fused = apply_dropout(tape, out.out, dropout);
                let fused = tape.zero_rows(fused, &bigram_mask);
                tape.mean_rows_masked(fused, &bigram_mask)?
            }
        };

        let pooled = if ablation.uses_concat_kg() {
            let nodes = graph_nodes.expect("concat variants use kg");
            let node_count = tape.value(nodes).nrows();
            let kg_pool = tape.mean_rows_masked(nodes, &vec![true; node_count])?;
            tape.concat_cols(&[pooled_text, kg_pool])
        } else {
            pooled_text
        };

        let cls = self.classifier_vars(leaves);
        let hidden = tape.matmul(pooled, cls.w1);
        let hidden = tape.add_row(hidden, cls.b1);
        let hidden = tape.gelu(hidden);
        let hidden = apply_dropout(tape, hidden, dropout);
        let logits = tape.matmul(hidden, cls.w2);
        let logits = tape.add_row(logits, cls.b2);

        Ok(ForwardPass {
            logits,
            artifacts: ForwardArtifacts {
                uni_attention: attended.retained,
                cross_scores,
                cross_gates,
                token_mask: mask.to_vec(),
                bigram_mask,
                kg_nodes: kg_names,
                attended_unigrams: unigrams,
            },
        })
    }

    /// Inference on one post: probabilities, predicted class and retained
    /// artifacts. No dropout.
    pub fn predict(
        &self,
        emb: &Array2<f64>,
        mask: &[bool],
        graph: Option<&PreparedGraph>,
    ) -> Result<(Vec<f64>, usize, ForwardArtifacts)> {
        let mut tape = Tape::new();
        let leaves = self.store.leaves(&mut tape);
        let pass = self.forward(&mut tape, &leaves, emb, mask, graph, &mut None)?;
        let logits = tape.value(pass.logits).row(0).to_vec();
        let (probs, class) = crate::fusion::classify_from_logits(&logits);
        Ok((probs, class, pass.artifacts))
    }
}
