//! The deep diagnosis model: per-student concept proficiencies and dense
//! concept embeddings feed two DNNs (latent trait, discrimination) and an
//! attention-based LSTM over question text (difficulty); the three
//! diagnosed parameters then drive the classical logistic formula.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classical::{irt_predict, IRT_SCALING};
use crate::data::{prepare_tokens, Corpus, Question, ResponseRecord};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, PROB_EPS};
use crate::params::{ParamId, ParamSet};
use crate::seeding::{rng_for, TAG_INIT};
use crate::tensor::Tensor;
use crate::train::{
    glorot_uniform_with, ForwardCtx, ModelKind, RecordGraph, TrainConfig, Trainable,
};

/// Bernoulli negative log-likelihood of a probability prediction, with
/// the probability clamped away from 0/1 by 1e-12 before the log.
pub fn nll_loss(prediction: f64, label: f64) -> f64 {
    let p = prediction.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Rows of the concept dense-embedding matrix for a question's concepts
/// (one-hot selection), in the question's concept order.
pub fn embed_concepts(question: &Question, concept_embedding: &Tensor) -> Result<Vec<Vec<f64>>> {
    if !concept_embedding.is_matrix() {
        return Err(Error::InvalidInput(
            "concept embedding must be a matrix".into(),
        ));
    }
    let cols = concept_embedding.cols();
    question
        .concepts
        .iter()
        .map(|&c| {
            if c >= concept_embedding.rows() {
                return Err(Error::InvalidInput(format!(
                    "concept index {c} out of range for embedding with {} rows",
                    concept_embedding.rows()
                )));
            }
            Ok(concept_embedding.data()[c * cols..(c + 1) * cols].to_vec())
        })
        .collect()
}

/// One attention step: mix the question's concept embeddings by their
/// scaled-dot relevance to the word vector, then add the word vector.
pub fn attention_step(
    g: &mut Graph,
    word: NodeId,
    concept_rows: &[NodeId],
    concept_matrix: NodeId,
    word_dim: usize,
) -> Result<NodeId> {
    let scale = 1.0 / (word_dim as f64).sqrt();
    let mut scores = Vec::with_capacity(concept_rows.len());
    for &k in concept_rows {
        let d = g.dot(word, k)?;
        scores.push(g.scale(d, scale)?);
    }
    let stacked = g.concat(&scores)?;
    let weights = g.softmax(stacked)?;
    let mixed = g.vecmat(weights, concept_matrix)?;
    g.add(mixed, word)
}

/// Value-level convenience over [`attention_step`].
pub fn attention_step_values(word: &[f64], concepts: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let w = g.constant(Tensor::vector(word.to_vec()))?;
    let rows: Vec<NodeId> = concepts
        .iter()
        .map(|k| g.constant(Tensor::vector(k.clone())))
        .collect::<Result<_>>()?;
    let km = g.stack_rows(&rows)?;
    let out = attention_step(&mut g, w, &rows, km, word.len())?;
    Ok(g.value(out).data().to_vec())
}

/// Weight/bias tensor suffixes of the four LSTM gates, in registration
/// and flattening order.
pub const LSTM_PARAM_NAMES: [&str; 12] = [
    "w_xi", "w_hi", "b_i", "w_xf", "w_hf", "b_f", "w_xo", "w_ho", "b_o", "w_xc", "w_hc", "b_c",
];

struct LstmNodes {
    w_xi: NodeId,
    w_hi: NodeId,
    b_i: NodeId,
    w_xf: NodeId,
    w_hf: NodeId,
    b_f: NodeId,
    w_xo: NodeId,
    w_ho: NodeId,
    b_o: NodeId,
    w_xc: NodeId,
    w_hc: NodeId,
    b_c: NodeId,
}

fn lstm_gate(
    g: &mut Graph,
    wx: NodeId,
    x: NodeId,
    wh: NodeId,
    h: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let zx = g.matvec(wx, x)?;
    let zh = g.matvec(wh, h)?;
    let z = g.add(zx, zh)?;
    g.add(z, b)
}

/// Run the LSTM over an input sequence, returning the final hidden state
/// node. Hidden and cell states start at zero.
fn lstm_forward_nodes(
    g: &mut Graph,
    inputs: &[NodeId],
    w: &LstmNodes,
    hidden_dim: usize,
) -> Result<NodeId> {
    let mut h = g.constant(Tensor::zeros(&[hidden_dim]))?;
    let mut c = g.constant(Tensor::zeros(&[hidden_dim]))?;
    for &x in inputs {
        let i_gate = lstm_gate(g, w.w_xi, x, w.w_hi, h, w.b_i)?;
        let i_gate = g.sigmoid(i_gate)?;
        let f_gate = lstm_gate(g, w.w_xf, x, w.w_hf, h, w.b_f)?;
        let f_gate = g.sigmoid(f_gate)?;
        let o_gate = lstm_gate(g, w.w_xo, x, w.w_ho, h, w.b_o)?;
        let o_gate = g.sigmoid(o_gate)?;
        let c_cand = lstm_gate(g, w.w_xc, x, w.w_hc, h, w.b_c)?;
        let c_cand = g.tanh(c_cand)?;

        let keep = g.mul(f_gate, c)?;
        let write = g.mul(i_gate, c_cand)?;
        c = g.add(keep, write)?;
        let ct = g.tanh(c)?;
        h = g.mul(o_gate, ct)?;
    }
    Ok(h)
}

/// Value-level LSTM pass. `weights` follow [`LSTM_PARAM_NAMES`] order:
/// per gate an input matrix `[hidden, in]`, a recurrent matrix
/// `[hidden, hidden]`, and a bias `[hidden]`.
pub fn lstm_forward_values(inputs: &[Vec<f64>], weights: &[Tensor]) -> Result<Vec<f64>> {
    if weights.len() != 12 {
        return Err(Error::InvalidInput(format!(
            "expected 12 gate tensors, got {}",
            weights.len()
        )));
    }
    let hidden = weights[2].numel();
    let mut g = Graph::new();
    let ids: Vec<NodeId> = weights
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<_>>()?;
    let nodes = LstmNodes {
        w_xi: ids[0],
        w_hi: ids[1],
        b_i: ids[2],
        w_xf: ids[3],
        w_hf: ids[4],
        b_f: ids[5],
        w_xo: ids[6],
        w_ho: ids[7],
        b_o: ids[8],
        w_xc: ids[9],
        w_hc: ids[10],
        b_c: ids[11],
    };
    let xs: Vec<NodeId> = inputs
        .iter()
        .map(|x| g.constant(Tensor::vector(x.clone())))
        .collect::<Result<_>>()?;
    let h = lstm_forward_nodes(&mut g, &xs, &nodes, hidden)?;
    Ok(g.value(h).data().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Activation {
    Tanh,
    /// Test harness only: disables nonlinearities for linearity oracles.
    #[cfg_attr(not(test), allow(dead_code))]
    Identity,
}

/// Two hidden layers of `concept_dim` width with a linear scalar output.
/// `weights` = [w1, b1, w2, b2, w3, b3]; dropout applies to the hidden
/// activations in train mode.
fn dnn_scalar(
    g: &mut Graph,
    ctx: &mut ForwardCtx,
    input: NodeId,
    weights: &[NodeId; 6],
    activation: Activation,
) -> Result<NodeId> {
    let act = |g: &mut Graph, x: NodeId| match activation {
        Activation::Tanh => g.tanh(x),
        Activation::Identity => Ok(x),
    };
    let z1 = g.matvec(weights[0], input)?;
    let z1 = g.add(z1, weights[1])?;
    let h1 = act(g, z1)?;
    let h1 = ctx.dropout_node(g, h1)?;
    let z2 = g.matvec(weights[2], h1)?;
    let z2 = g.add(z2, weights[3])?;
    let h2 = act(g, z2)?;
    let h2 = ctx.dropout_node(g, h2)?;
    let out = g.dot(weights[4], h2)?;
    g.add(out, weights[5])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirtConfig {
    /// Word-vector dimension d0.
    pub word_dim: usize,
    /// Concept dense-embedding dimension d1; must equal `word_dim` for
    /// the attention inner product.
    pub concept_dim: usize,
    /// Question texts are truncated or zero-padded to this many tokens.
    pub max_seq_len: usize,
    pub hidden_dim: usize,
    /// When false, difficulty comes from a DNN over the mean word vector
    /// instead of the attention LSTM (the `dirtna` variant).
    pub attention: bool,
    /// Use the uncentered `8*sigmoid(x - 0.5)` range transform for
    /// discrimination (range (0,8)) instead of the centered
    /// `8*(sigmoid(x) - 0.5)` form. Kept for comparison only.
    pub uncentered_discrimination: bool,
}

impl Default for DirtConfig {
    fn default() -> Self {
        DirtConfig {
            word_dim: 50,
            concept_dim: 50,
            max_seq_len: 30,
            hidden_dim: 50,
            attention: true,
            uncentered_discrimination: false,
        }
    }
}

/// Diagnosed parameters for one (student, question) pair.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosisResult {
    pub theta: f64,
    pub a: f64,
    pub b: f64,
    pub p: f64,
    /// The student's proficiency on the question's concepts, as
    /// (concept index, value in [0,1]) pairs in question order.
    pub alpha_view: Vec<(usize, f64)>,
    /// False when the student had no training evidence and the
    /// proficiencies are still at their initialization.
    pub student_trained: bool,
}

pub struct DirtModel {
    pub config: DirtConfig,
    params: ParamSet,
    n_students: usize,
    n_concepts: usize,
    trained_students: Vec<bool>,
}

struct ForwardNodes {
    theta: NodeId,
    a: NodeId,
    b: NodeId,
    p: NodeId,
    alpha: NodeId,
}

/// Parameter leaves already inserted into a graph, so records sharing a
/// graph share leaves (and their gradients accumulate over the fan-out).
#[derive(Default)]
struct LeafCache {
    map: std::collections::HashMap<ParamId, NodeId>,
    list: Vec<(ParamId, NodeId)>,
}

impl DirtModel {
    pub fn new(corpus: &Corpus, config: DirtConfig, seed: u64) -> Result<Self> {
        if config.word_dim != config.concept_dim {
            return Err(Error::Config(format!(
                "word dimension {} must equal concept dimension {} for the attention inner product",
                config.word_dim, config.concept_dim
            )));
        }
        if corpus.embeddings.dim() != config.word_dim {
            return Err(Error::Config(format!(
                "embedding table dimension {} does not match configured word dimension {}",
                corpus.embeddings.dim(),
                config.word_dim
            )));
        }
        let p = corpus.n_concepts();
        let d1 = config.concept_dim;
        let h = config.hidden_dim;
        let mut rng = rng_for(seed, &[TAG_INIT]);
        let mut params = ParamSet::new();

        // pre-sigmoid proficiencies start near 0.5 (0.1-scaled normals)
        for s in 0..corpus.n_students() {
            let raw: Vec<f64> = (0..p)
                .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            params.register(format!("proficiency.{s}"), Tensor::vector(raw));
        }
        params.register("concept_embedding", glorot_uniform_with(&[p, d1], &mut rng));
        for net in ["trait_net", "disc_net"] {
            params.register(format!("{net}.w1"), glorot_uniform_with(&[d1, d1], &mut rng));
            params.register(format!("{net}.b1"), glorot_uniform_with(&[d1], &mut rng));
            params.register(format!("{net}.w2"), glorot_uniform_with(&[d1, d1], &mut rng));
            params.register(format!("{net}.b2"), glorot_uniform_with(&[d1], &mut rng));
            params.register(format!("{net}.w3"), glorot_uniform_with(&[d1], &mut rng));
            params.register(format!("{net}.b3"), glorot_uniform_with(&[1], &mut rng));
        }
        if config.attention {
            for name in LSTM_PARAM_NAMES {
                let shape: Vec<usize> = match name.as_bytes()[0] {
                    b'b' => vec![h],
                    _ if name.starts_with("w_x") => vec![h, config.word_dim],
                    _ => vec![h, h],
                };
                params.register(format!("lstm.{name}"), glorot_uniform_with(&shape, &mut rng));
            }
        } else {
            params.register(
                "diff_net.w1",
                glorot_uniform_with(&[d1, config.word_dim], &mut rng),
            );
            params.register("diff_net.b1", glorot_uniform_with(&[d1], &mut rng));
            params.register("diff_net.w2", glorot_uniform_with(&[d1, d1], &mut rng));
            params.register("diff_net.b2", glorot_uniform_with(&[d1], &mut rng));
            params.register("diff_net.w3", glorot_uniform_with(&[d1], &mut rng));
            params.register("diff_net.b3", glorot_uniform_with(&[1], &mut rng));
        }

        Ok(DirtModel {
            config,
            params,
            n_students: corpus.n_students(),
            n_concepts: p,
            trained_students: vec![false; corpus.n_students()],
        })
    }

    pub fn n_students(&self) -> usize {
        self.n_students
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn is_trained(&self, student: usize) -> bool {
        self.trained_students.get(student).copied().unwrap_or(false)
    }

    pub fn set_trained_students(&mut self, flags: Vec<bool>) {
        self.trained_students = flags;
    }

    pub fn trained_students(&self) -> &[bool] {
        &self.trained_students
    }

    /// The student's full proficiency vector in [0,1]^P.
    pub fn proficiency(&self, student: usize) -> Result<Vec<f64>> {
        if student >= self.n_students {
            return Err(Error::InvalidInput(format!(
                "student index {student} out of range"
            )));
        }
        Ok(self
            .params
            .by_name(&format!("proficiency.{student}"))?
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect())
    }

    fn leaf(&self, g: &mut Graph, cache: &mut LeafCache, name: &str) -> Result<NodeId> {
        let pid = self
            .params
            .id_of(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
        if let Some(&node) = cache.map.get(&pid) {
            return Ok(node);
        }
        let node = g.leaf(Arc::clone(self.params.get(pid)))?;
        cache.map.insert(pid, node);
        cache.list.push((pid, node));
        Ok(node)
    }

    fn net_leaves(&self, g: &mut Graph, cache: &mut LeafCache, net: &str) -> Result<[NodeId; 6]> {
        Ok([
            self.leaf(g, cache, &format!("{net}.w1"))?,
            self.leaf(g, cache, &format!("{net}.b1"))?,
            self.leaf(g, cache, &format!("{net}.w2"))?,
            self.leaf(g, cache, &format!("{net}.b2"))?,
            self.leaf(g, cache, &format!("{net}.w3"))?,
            self.leaf(g, cache, &format!("{net}.b3"))?,
        ])
    }

    /// Map a raw network output into the bounded parameter range.
    fn range_transform(&self, g: &mut Graph, raw: NodeId) -> Result<NodeId> {
        if self.config.uncentered_discrimination {
            let shifted = g.shift(raw, -0.5)?;
            let s = g.sigmoid(shifted)?;
            g.scale(s, 8.0)
        } else {
            let s = g.sigmoid(raw)?;
            let s = g.shift(s, -0.5)?;
            g.scale(s, 8.0)
        }
    }

    fn build_forward(
        &self,
        g: &mut Graph,
        cache: &mut LeafCache,
        corpus: &Corpus,
        student: usize,
        question: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<ForwardNodes> {
        if student >= self.n_students {
            return Err(Error::InvalidInput(format!(
                "student index {student} out of range"
            )));
        }
        let q = corpus
            .questions
            .get(question)
            .ok_or_else(|| Error::InvalidInput(format!("question index {question} out of range")))?;

        let alpha_raw = self.leaf(g, cache, &format!("proficiency.{student}"))?;
        let alpha = g.sigmoid(alpha_raw)?;
        let w_k = self.leaf(g, cache, "concept_embedding")?;

        // dense embeddings of the question's concepts (row selection)
        let rows: Vec<NodeId> = q
            .concepts
            .iter()
            .map(|&c| g.select_row(w_k, c))
            .collect::<Result<_>>()?;

        // latent trait: proficiency-weighted concept sum through the trait net
        let mut weighted = None;
        for (&c, &row) in q.concepts.iter().zip(&rows) {
            let ac = g.gather(alpha, &[c])?;
            let term = g.mul_scalar(ac, row)?;
            weighted = Some(match weighted {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let trait_input = weighted.expect("questions have at least one concept");
        let trait_net = self.net_leaves(g, cache, "trait_net")?;
        let theta = dnn_scalar(g, ctx, trait_input, &trait_net, Activation::Tanh)?;

        // discrimination: unweighted concept sum through its own net
        let mut summed = rows[0];
        for &row in &rows[1..] {
            summed = g.add(summed, row)?;
        }
        let disc_net = self.net_leaves(g, cache, "disc_net")?;
        let disc_raw = dnn_scalar(g, ctx, summed, &disc_net, Activation::Tanh)?;
        let a = self.range_transform(g, disc_raw)?;

        // difficulty from question text
        let tokens = prepare_tokens(q, self.config.max_seq_len);
        let diff_raw = if self.config.attention {
            let lstm = LstmNodes {
                w_xi: self.leaf(g, cache, "lstm.w_xi")?,
                w_hi: self.leaf(g, cache, "lstm.w_hi")?,
                b_i: self.leaf(g, cache, "lstm.b_i")?,
                w_xf: self.leaf(g, cache, "lstm.w_xf")?,
                w_hf: self.leaf(g, cache, "lstm.w_hf")?,
                b_f: self.leaf(g, cache, "lstm.b_f")?,
                w_xo: self.leaf(g, cache, "lstm.w_xo")?,
                w_ho: self.leaf(g, cache, "lstm.w_ho")?,
                b_o: self.leaf(g, cache, "lstm.b_o")?,
                w_xc: self.leaf(g, cache, "lstm.w_xc")?,
                w_hc: self.leaf(g, cache, "lstm.w_hc")?,
                b_c: self.leaf(g, cache, "lstm.b_c")?,
            };
            let concept_matrix = g.stack_rows(&rows)?;
            let mut xs = Vec::with_capacity(tokens.len());
            for &t in &tokens {
                let w = g.constant(Tensor::vector(corpus.embeddings.lookup(t).to_vec()))?;
                let x = attention_step(g, w, &rows, concept_matrix, self.config.word_dim)?;
                let x = ctx.dropout_node(g, x)?;
                xs.push(x);
            }
            let h_last = lstm_forward_nodes(g, &xs, &lstm, self.config.hidden_dim)?;
            g.mean(h_last)?
        } else {
            // dirtna: the text enters as a plain mean of its word vectors
            let mut mean = vec![0.0; self.config.word_dim];
            for &t in &tokens {
                for (dst, &v) in mean.iter_mut().zip(corpus.embeddings.lookup(t)) {
                    *dst += v;
                }
            }
            for v in &mut mean {
                *v /= tokens.len() as f64;
            }
            let mean_node = g.constant(Tensor::vector(mean))?;
            let diff_net = self.net_leaves(g, cache, "diff_net")?;
            dnn_scalar(g, ctx, mean_node, &diff_net, Activation::Tanh)?
        };
        let b = self.range_transform(g, diff_raw)?;

        // prediction through the logistic formula with D = 1.7
        let a_scaled = g.scale(a, IRT_SCALING)?;
        let gap = g.sub(theta, b)?;
        let z = g.mul(a_scaled, gap)?;
        let p = g.sigmoid(z)?;

        Ok(ForwardNodes {
            theta,
            a,
            b,
            p,
            alpha,
        })
    }

    /// Mean loss over several records in one graph with shared parameter
    /// leaves (fan-out accumulates their gradients across records).
    pub fn build_mean_loss(
        &self,
        corpus: &Corpus,
        records: &[ResponseRecord],
        ctx: &mut ForwardCtx,
    ) -> Result<RecordGraph> {
        if records.is_empty() {
            return Err(Error::InvalidInput("no records to build a loss over".into()));
        }
        let mut g = Graph::with_capacity(records.len() * (self.config.max_seq_len * 34 + 64));
        let mut cache = LeafCache::default();
        let mut losses = Vec::with_capacity(records.len());
        let mut last_prob = None;
        for rec in records {
            let nodes = self.build_forward(&mut g, &mut cache, corpus, rec.student, rec.question, ctx)?;
            losses.push(g.bce(nodes.p, rec.score as f64)?);
            last_prob = Some(nodes.p);
        }
        let loss = if losses.len() == 1 {
            losses[0]
        } else {
            let cat = g.concat(&losses)?;
            g.mean(cat)?
        };
        Ok(RecordGraph {
            graph: g,
            loss,
            prob: last_prob.expect("at least one record"),
            params: cache.list,
        })
    }

    /// Inference-mode diagnosis of one (student, question) pair.
    pub fn diagnose(
        &self,
        corpus: &Corpus,
        student: usize,
        question: usize,
    ) -> Result<DiagnosisResult> {
        let mut ctx = ForwardCtx::infer();
        let mut g = Graph::with_capacity(self.config.max_seq_len * 34 + 64);
        let mut cache = LeafCache::default();
        let nodes = self.build_forward(&mut g, &mut cache, corpus, student, question, &mut ctx)?;
        let alpha = g.value(nodes.alpha).data();
        let alpha_view = corpus.questions[question]
            .concepts
            .iter()
            .map(|&c| (c, alpha[c]))
            .collect();
        let result = DiagnosisResult {
            theta: g.value(nodes.theta).item(),
            a: g.value(nodes.a).item(),
            b: g.value(nodes.b).item(),
            p: g.value(nodes.p).item(),
            alpha_view,
            student_trained: self.is_trained(student),
        };
        debug_assert_eq!(result.p, irt_predict(result.theta, result.a, result.b));
        Ok(result)
    }
}

impl Trainable for DirtModel {
    fn kind(&self) -> ModelKind {
        if self.config.attention {
            ModelKind::Dirt
        } else {
            ModelKind::Dirtna
        }
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn build_record_loss(
        &self,
        corpus: &Corpus,
        record: &ResponseRecord,
        ctx: &mut ForwardCtx,
    ) -> Result<RecordGraph> {
        self.build_mean_loss(corpus, std::slice::from_ref(record), ctx)
    }

    fn note_trained_students(&mut self, seen: &[bool]) {
        self.trained_students = seen.to_vec();
    }
}

/// Parameter restore helper shared with the checkpoint module: a model is
/// rebuilt from config + corpus shape and its tensors overwritten.
pub fn dirt_from_parts(
    corpus: &Corpus,
    config: DirtConfig,
    flat: &[f64],
    trained: Vec<bool>,
) -> Result<DirtModel> {
    let mut model = DirtModel::new(corpus, config, 0)?;
    model.params_mut().load_flat(flat)?;
    model.set_trained_students(trained);
    Ok(model)
}

/// Convenience constructor covering both deep variants for the CLI.
pub fn new_deep_model(
    kind: ModelKind,
    corpus: &Corpus,
    mut config: DirtConfig,
    cfg: &TrainConfig,
) -> Result<DirtModel> {
    config.attention = match kind {
        ModelKind::Dirt => true,
        ModelKind::Dirtna => false,
        other => {
            return Err(Error::Config(format!(
                "{other} is not a deep model kind"
            )))
        }
    };
    DirtModel::new(corpus, config, cfg.seed)
}
