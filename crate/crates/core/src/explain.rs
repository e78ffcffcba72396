//! Saliency extraction from retained attention weights, exported as JSON or
//! a self-contained HTML heatmap.
//!
//! Unigram importance is attention received: the column mean, over valid
//! query rows, of the head-averaged unigram attention matrix, renormalized
//! over valid tokens. Bigram importance comes from the cross-attention gate
//! values (gated mode) or the row maxima of the score matrices (graph-value
//! mode), head-averaged and renormalized. An optional gradient-scaled
//! variant multiplies attention received by the gradient norm of the
//! predicted logit with respect to each attended unigram vector.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{pad_and_mask, Post};
use crate::embeddings::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::fusion::classify_from_logits;
use crate::harness::prepare_posts;
use crate::kg::Mhkg;
use crate::model::{ForwardArtifacts, Model};

/// How unigram saliency is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SaliencyMethod {
    /// Column means of head-averaged attention (attention received).
    #[default]
    Attention,
    /// Attention received scaled by the gradient norm of the predicted
    /// logit with respect to each attended unigram vector.
    GradAttention,
}

/// Per-post saliency export. Saliency vectors span the padded length; the
/// entries at padded positions are exactly zero and the valid entries sum
/// to one. `bigrams[j]` is the token pair `"tok_j tok_j+1"` when both
/// tokens exist, empty otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub schema: u32,
    pub post_id: String,
    pub tokens: Vec<String>,
    pub unigram_saliency: Vec<f64>,
    pub bigrams: Vec<String>,
    pub bigram_saliency: Vec<f64>,
    pub predicted_class: usize,
    pub probabilities: Vec<f64>,
    /// Per-bigram highest-attention graph node, when the variant attends to
    /// the knowledge graph.
    pub top_kg_nodes: Vec<String>,
}

fn head_average(heads: &[Array2<f64>]) -> Option<Array2<f64>> {
    let first = heads.first()?;
    let mut acc = Array2::zeros(first.raw_dim());
    for h in heads {
        acc += h;
    }
    Some(acc / heads.len() as f64)
}

fn renormalize(mut weights: Vec<f64>, mask: &[bool]) -> Vec<f64> {
    let total: f64 = weights
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(w, _)| *w)
        .sum();
    for (w, &m) in weights.iter_mut().zip(mask) {
        if !m {
            *w = 0.0;
        } else if total > 0.0 {
            *w /= total;
        }
    }
    if total <= 0.0 {
        // Degenerate fall-back: uniform over valid positions.
        let count = mask.iter().filter(|&&m| m).count() as f64;
        for (w, &m) in weights.iter_mut().zip(mask) {
            *w = if m { 1.0 / count } else { 0.0 };
        }
    }
    weights
}

fn unigram_saliency_from(artifacts: &ForwardArtifacts) -> Vec<f64> {
    let mask = &artifacts.token_mask;
    let attn = head_average(&artifacts.uni_attention).expect("at least one head");
    let valid_rows = mask.iter().filter(|&&m| m).count() as f64;
    let mut received = vec![0.0; mask.len()];
    for (r, &valid) in mask.iter().enumerate() {
        if !valid {
            continue;
        }
        for (c, slot) in received.iter_mut().enumerate() {
            *slot += attn[[r, c]] / valid_rows;
        }
    }
    renormalize(received, mask)
}

fn bigram_saliency_from(model: &Model, artifacts: &ForwardArtifacts) -> Vec<f64> {
    let mask = &artifacts.bigram_mask;
    if mask.is_empty() || artifacts.cross_gates.is_empty() {
        return vec![0.0; mask.len()];
    }
    let source = match model.config.cross_mode {
        crate::fusion::CrossMode::GatedBigramValues => &artifacts.cross_gates,
        // Row maxima of the scores equal the gate column contents.
        crate::fusion::CrossMode::KgValues => &artifacts.cross_gates,
    };
    let averaged = head_average(source).expect("at least one head");
    let weights: Vec<f64> = (0..mask.len()).map(|j| averaged[[j, 0]]).collect();
    renormalize(weights, mask)
}

fn top_kg_nodes_from(artifacts: &ForwardArtifacts) -> Vec<String> {
    if artifacts.cross_scores.is_empty() || artifacts.kg_nodes.is_empty() {
        return Vec::new();
    }
    let averaged = head_average(&artifacts.cross_scores).expect("at least one head");
    artifacts
        .bigram_mask
        .iter()
        .enumerate()
        .map(|(j, &valid)| {
            if !valid {
                return String::new();
            }
            let mut best = 0;
            for c in 0..averaged.ncols() {
                if averaged[[j, c]] > averaged[[j, best]] {
                    best = c;
                }
            }
            artifacts.kg_nodes[best].clone()
        })
        .collect()
}

/// Scale attention-received weights by the gradient norm of the predicted
/// logit with respect to each attended unigram row.
fn grad_scale(
    model: &Model,
    emb: &Array2<f64>,
    mask: &[bool],
    graph: Option<&crate::kg_encoder::PreparedGraph>,
    received: &[f64],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let leaves = model.store.leaves(&mut tape);
    let pass = model.forward(&mut tape, &leaves, emb, mask, graph, &mut None)?;
    let logits = tape.value(pass.logits).row(0).to_vec();
    let (_, class) = classify_from_logits(&logits);
    let target = tape.slice_cols(pass.logits, class, 1);
    tape.backward(target);
    let grads = tape.grad(pass.artifacts.attended_unigrams);
    let mut scaled: Vec<f64> = received.to_vec();
    for (j, s) in scaled.iter_mut().enumerate() {
        let norm: f64 = grads.row(j).iter().map(|g| g * g).sum::<f64>().sqrt();
        *s *= norm;
    }
    Ok(scaled)
}

/// Explain one post with a (trained or initialized) model. Deterministic:
/// dropout is off at inference.
pub fn explain_post(
    model: &Model,
    post: &Post,
    provider: &EmbeddingProvider,
    kg: Option<&Mhkg>,
    method: SaliencyMethod,
) -> Result<ExplanationRecord> {
    if post.tokens.is_empty() {
        return Err(Error::EmptyPost {
            id: post.id.clone(),
        });
    }
    let mut config = model.config.clone();
    config.ablation = model.config.ablation;
    let labeled = Post {
        label: post.label.or(Some(0)),
        ..post.clone()
    };
    let (prepared, _) = prepare_posts(
        std::slice::from_ref(&labeled),
        provider,
        kg,
        &config,
    )?;
    let prepared = &prepared[0];
    let target_len = prepared.emb.nrows().clamp(2, config.max_len);
    let batch = pad_and_mask(std::slice::from_ref(&prepared.emb), target_len)?;
    let emb = batch.post_embeddings(0);
    let mask = batch.post_mask(0);

    let (probabilities, predicted_class, artifacts) =
        model.predict(&emb, &mask, prepared.graph.as_ref())?;

    let received = unigram_saliency_from(&artifacts);
    let unigram_saliency = match method {
        SaliencyMethod::Attention => received,
        SaliencyMethod::GradAttention => {
            let scaled = grad_scale(
                model,
                &emb,
                &mask,
                prepared.graph.as_ref(),
                &received,
            )?;
            renormalize(scaled, &artifacts.token_mask)
        }
    };
    let bigram_saliency = bigram_saliency_from(model, &artifacts);
    let top_kg_nodes = top_kg_nodes_from(&artifacts);

    let tokens: Vec<String> = prepared
        .tokens
        .iter()
        .take(target_len)
        .cloned()
        .collect();
    let bigrams: Vec<String> = (0..mask.len().saturating_sub(1))
        .map(|j| {
            if j + 1 < tokens.len() {
                format!("{} {}", tokens[j], tokens[j + 1])
            } else {
                String::new()
            }
        })
        .collect();

    Ok(ExplanationRecord {
        schema: 1,
        post_id: post.id.clone(),
        tokens,
        unigram_saliency,
        bigrams,
        bigram_saliency,
        predicted_class,
        probabilities,
        top_kg_nodes,
    })
}

fn escape_html(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Opacity byte for a saliency value: `round(255 * s / max_s)`.
fn opacity_byte(saliency: f64, max_saliency: f64) -> u32 {
    if max_saliency <= 0.0 {
        return 0;
    }
    (255.0 * saliency / max_saliency).round() as u32
}

fn span_row(items: &[(String, f64)], class: &str) -> String {
    let max = items.iter().map(|(_, s)| *s).fold(0.0f64, f64::max);
    let mut row = String::new();
    for (text, saliency) in items {
        let byte = opacity_byte(*saliency, max);
        let alpha = byte as f64 / 255.0;
        row.push_str(&format!(
            "<span class=\"{class}\" data-opacity=\"{byte}\" \
             style=\"background-color: rgba(214, 69, 69, {alpha:.4});\">{}</span> ",
            escape_html(text)
        ));
    }
    row
}

/// Render a record as one self-contained HTML page: token spans with
/// background opacity proportional to saliency (`data-opacity` holds the
/// rounded byte), a bigram row beneath, and the prediction header. No
/// external resources.
pub fn render_html(record: &ExplanationRecord) -> String {
    let unigram_items: Vec<(String, f64)> = record
        .tokens
        .iter()
        .enumerate()
        .map(|(j, t)| (t.clone(), record.unigram_saliency[j]))
        .collect();
    let bigram_items: Vec<(String, f64)> = record
        .bigrams
        .iter()
        .enumerate()
        .filter(|(_, b)| !b.is_empty())
        .map(|(j, b)| (b.clone(), record.bigram_saliency[j]))
        .collect();

    let probs = record
        .probabilities
        .iter()
        .enumerate()
        .map(|(c, p)| format!("class {c}: {p:.4}"))
        .collect::<Vec<_>>()
        .join(", ");

    let bigram_section = if bigram_items.is_empty() {
        String::new()
    } else {
        format!(
            "<h2>Bigram saliency</h2><p class=\"bigrams\">{}</p>",
            span_row(&bigram_items, "bigram")
        )
    };

    format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\"></meta>\n\
         <title>Explanation for {id}</title>\n\
         <style>body {{ font-family: sans-serif; margin: 2em; }} \
         span {{ padding: 2px 4px; margin: 1px; border-radius: 3px; }}</style>\n\
         </head>\n<body>\n\
         <h1>Post {id}</h1>\n\
         <p class=\"prediction\">Predicted severity: <strong>{class}</strong> ({probs})</p>\n\
         <h2>Token saliency</h2><p class=\"tokens\">{tokens}</p>\n\
         {bigrams}\n\
         </body>\n</html>\n",
        id = escape_html(&record.post_id),
        class = record.predicted_class,
        probs = probs,
        tokens = span_row(&unigram_items, "token"),
        bigrams = bigram_section,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ModelConfig;
    use crate::model::Ablation;

    fn provider() -> EmbeddingProvider {
        EmbeddingProvider::hashed()
    }

    fn small_model(ablation: Ablation) -> Model {
        Model::new(ModelConfig {
            hidden: 8,
            uni_heads: 2,
            bi_heads: 2,
            lstm_layers: 1,
            gnn_layers: 1,
            max_len: 16,
            ablation,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn sample_kg() -> Mhkg {
        crate::kg::load_kg_str(crate::kg::bundled_sample_kg(), &provider()).unwrap()
    }

    #[test]
    fn single_valid_token_gets_all_unigram_saliency() {
        let model = small_model(Ablation::A0);
        let post = Post::new("p1", "alone", None).unwrap();
        let record = explain_post(&model, &post, &provider(), None, SaliencyMethod::Attention)
            .unwrap();
        assert_eq!(record.unigram_saliency[0], 1.0);
        assert!(record.unigram_saliency[1..].iter().all(|&s| s == 0.0));
        assert!(record.bigram_saliency.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn saliency_sums_to_one_all_variants() {
        let kg = sample_kg();
        let post = Post::new("p2", "i feel tired and empty these days", None).unwrap();
        for ablation in Ablation::ALL {
            let model = small_model(ablation);
            let kg_opt = ablation.uses_kg().then_some(&kg);
            let record =
                explain_post(&model, &post, &provider(), kg_opt, SaliencyMethod::Attention)
                    .unwrap();
            let sum: f64 = record.unigram_saliency.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "{ablation:?}: unigram sum {sum}");
            if ablation.uses_cross_attention() && ablation.uses_bigrams() {
                let bsum: f64 = record.bigram_saliency.iter().sum();
                assert!((bsum - 1.0).abs() < 1e-6, "{ablation:?}: bigram sum {bsum}");
                assert_eq!(record.top_kg_nodes.len(), record.bigram_saliency.len());
            }
        }
    }

    #[test]
    fn grad_attention_variant_is_normalized_and_deterministic() {
        let model = small_model(Ablation::A0);
        let post = Post::new("p3", "some words to weigh", None).unwrap();
        let a = explain_post(&model, &post, &provider(), None, SaliencyMethod::GradAttention)
            .unwrap();
        let b = explain_post(&model, &post, &provider(), None, SaliencyMethod::GradAttention)
            .unwrap();
        assert_eq!(a, b);
        let sum: f64 = a.unigram_saliency.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_post_is_rejected() {
        let model = small_model(Ablation::A0);
        let post = Post {
            id: "void".into(),
            text: String::new(),
            tokens: Vec::new(),
            label: None,
        };
        assert!(matches!(
            explain_post(&model, &post, &provider(), None, SaliencyMethod::Attention),
            Err(Error::EmptyPost { .. })
        ));
    }

    #[test]
    fn padding_does_not_change_valid_saliency() {
        // Same post explained against two max_len settings: the saliency at
        // valid positions must match exactly.
        let post = Post::new("p4", "four plain tokens here", None).unwrap();
        let mut long = small_model(Ablation::A0);
        long.config.max_len = 32;
        let short = small_model(Ablation::A0);
        let a = explain_post(&long, &post, &provider(), None, SaliencyMethod::Attention).unwrap();
        let b = explain_post(&short, &post, &provider(), None, SaliencyMethod::Attention).unwrap();
        assert_eq!(a.unigram_saliency[..4], b.unigram_saliency[..4]);
    }

    #[test]
    fn json_roundtrip_is_lossless() {
        let model = small_model(Ablation::A0);
        let post = Post::new("p5", "words for the round trip", None).unwrap();
        let record =
            explain_post(&model, &post, &provider(), None, SaliencyMethod::Attention).unwrap();
        let json = serde_json::to_string(&record).unwrap();
        let back: ExplanationRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(record, back);
    }

    #[test]
    fn html_output_is_wellformed_and_encodes_opacity() {
        let record = ExplanationRecord {
            schema: 1,
            post_id: "p<6>".into(),
            tokens: vec!["alpha".into(), "beta".into()],
            unigram_saliency: vec![0.75, 0.25],
            bigrams: vec!["alpha beta".into()],
            bigram_saliency: vec![1.0],
            predicted_class: 2,
            probabilities: vec![0.1, 0.2, 0.6, 0.1],
            top_kg_nodes: vec!["stress".into()],
        };
        let html = render_html(&record);
        assert!(html.contains("data-opacity=\"255\""));
        // 0.25 / 0.75 * 255 = 85.
        assert!(html.contains("data-opacity=\"85\""));
        assert!(html.contains("&lt;6&gt;"));
        assert!(!html.contains("http://"));
        assert!(!html.contains("https://"));

        // Uniform saliency renders identical opacity bytes.
        let uniform = ExplanationRecord {
            unigram_saliency: vec![0.5, 0.5],
            ..record
        };
        let html2 = render_html(&uniform);
        let count = html2.matches("data-opacity=\"255\"").count();
        assert!(count >= 2);
    }
}
