//! Classical cognitive diagnosis baselines: unidimensional IRT, MIRT,
//! and DINA, all fitted by gradient MLE on the shared autodiff core.

use std::sync::Arc;

use crate::data::{Corpus, ResponseRecord};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::ParamSet;
use crate::train::{
    train, ForwardCtx, ModelKind, RecordGraph, TrainConfig, TrainReport, Trainable,
};
use crate::tensor::Tensor;

/// The logistic scaling constant D.
pub const IRT_SCALING: f64 = 1.7;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Map an unconstrained real into (-4, 4): `8 * (sigmoid(x) - 0.5)`.
pub fn bounded_range(x: f64) -> f64 {
    8.0 * (sigmoid(x) - 0.5)
}

/// Inverse of [`bounded_range`].
pub fn bounded_range_inv(y: f64) -> f64 {
    let s = y / 8.0 + 0.5;
    (s / (1.0 - s)).ln()
}

/// Correct-response probability of the logistic model
/// `1 / (1 + exp(-D a (theta - b)))`.
pub fn irt_predict(theta: f64, a: f64, b: f64) -> f64 {
    sigmoid(IRT_SCALING * a * (theta - b))
}

/// Multidimensional logistic model `sigmoid(a . theta + d)`.
pub fn mirt_predict(theta: &[f64], a: &[f64], d: f64) -> Result<f64> {
    if theta.len() != a.len() {
        return Err(Error::ShapeMismatch {
            op: "mirt_predict",
            lhs: vec![theta.len()],
            rhs: vec![a.len()],
        });
    }
    let z: f64 = theta.iter().zip(a).map(|(t, w)| t * w).sum::<f64>() + d;
    Ok(sigmoid(z))
}

/// Conjunctive DINA gate: `1 - slip` when every required concept is
/// mastered, else `guess`.
pub fn dina_predict(mastery: &[bool], required: &[usize], slip: f64, guess: f64) -> Result<f64> {
    if required.is_empty() {
        return Err(Error::InvalidInput(
            "dina_predict requires a non-empty concept set".into(),
        ));
    }
    if let Some(&bad) = required.iter().find(|&&c| c >= mastery.len()) {
        return Err(Error::InvalidInput(format!(
            "concept index {bad} out of range for mastery vector of length {}",
            mastery.len()
        )));
    }
    let all = required.iter().all(|&c| mastery[c]);
    Ok(if all { 1.0 - slip } else { guess })
}

/// Unidimensional IRT with one latent trait per student and
/// range-constrained discrimination/difficulty per question.
pub struct IrtModel {
    params: ParamSet,
}

impl IrtModel {
    /// Deterministic symmetric initialization: all traits and difficulties
    /// start at 0 and discrimination at 1, which breaks the a=0 saddle
    /// while keeping identical students on identical trajectories.
    pub fn new(corpus: &Corpus) -> Self {
        let mut params = ParamSet::new();
        params.register("theta", Tensor::vector(vec![0.0; corpus.n_students()]));
        params.register(
            "disc_raw",
            Tensor::vector(vec![bounded_range_inv(1.0); corpus.n_questions()]),
        );
        params.register("diff_raw", Tensor::vector(vec![0.0; corpus.n_questions()]));
        IrtModel { params }
    }

    pub fn theta(&self, student: usize) -> f64 {
        self.params.by_name("theta").unwrap().data()[student]
    }

    pub fn discrimination(&self, question: usize) -> f64 {
        bounded_range(self.params.by_name("disc_raw").unwrap().data()[question])
    }

    pub fn difficulty(&self, question: usize) -> f64 {
        bounded_range(self.params.by_name("diff_raw").unwrap().data()[question])
    }
}

impl Trainable for IrtModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Irt
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn build_record_loss(
        &self,
        _corpus: &Corpus,
        record: &ResponseRecord,
        _ctx: &mut ForwardCtx,
    ) -> Result<RecordGraph> {
        let mut g = Graph::with_capacity(16);
        let theta_id = self.params.id_of("theta").unwrap();
        let disc_id = self.params.id_of("disc_raw").unwrap();
        let diff_id = self.params.id_of("diff_raw").unwrap();
        let theta = g.leaf(Arc::clone(self.params.get(theta_id)))?;
        let disc_raw = g.leaf(Arc::clone(self.params.get(disc_id)))?;
        let diff_raw = g.leaf(Arc::clone(self.params.get(diff_id)))?;

        let th = g.gather(theta, &[record.student])?;
        let ar = g.gather(disc_raw, &[record.question])?;
        let br = g.gather(diff_raw, &[record.question])?;
        let a = g.sigmoid(ar)?;
        let a = g.shift(a, -0.5)?;
        let a = g.scale(a, 8.0)?;
        let b = g.sigmoid(br)?;
        let b = g.shift(b, -0.5)?;
        let b = g.scale(b, 8.0)?;

        // scale a first so the rounding order matches irt_predict exactly
        let a_scaled = g.scale(a, IRT_SCALING)?;
        let diff = g.sub(th, b)?;
        let z = g.mul(a_scaled, diff)?;
        let prob = g.sigmoid(z)?;
        let loss = g.bce(prob, record.score as f64)?;
        Ok(RecordGraph {
            graph: g,
            loss,
            prob,
            params: vec![(theta_id, theta), (disc_id, disc_raw), (diff_id, diff_raw)],
        })
    }

    fn predict_prob(&self, _corpus: &Corpus, student: usize, question: usize) -> Result<f64> {
        Ok(irt_predict(
            self.theta(student),
            self.discrimination(question),
            self.difficulty(question),
        ))
    }
}

/// MIRT with a per-student trait vector and per-question discrimination
/// supported only on the question's concepts.
pub struct MirtModel {
    params: ParamSet,
    n_concepts: usize,
}

impl MirtModel {
    pub fn new(corpus: &Corpus) -> Self {
        let mut params = ParamSet::new();
        for s in 0..corpus.n_students() {
            params.register(
                format!("trait.{s}"),
                Tensor::vector(vec![0.0; corpus.n_concepts()]),
            );
        }
        for (q, question) in corpus.questions.iter().enumerate() {
            params.register(
                format!("disc.{q}"),
                Tensor::vector(vec![1.0; question.concepts.len()]),
            );
        }
        params.register("intercept", Tensor::vector(vec![0.0; corpus.n_questions()]));
        MirtModel {
            params,
            n_concepts: corpus.n_concepts(),
        }
    }

    /// Full trait vector for a student.
    pub fn trait_vector(&self, student: usize) -> Vec<f64> {
        self.params
            .by_name(&format!("trait.{student}"))
            .unwrap()
            .data()
            .to_vec()
    }

    /// Dense discrimination vector (zero outside the question's concepts).
    pub fn discrimination_dense(&self, corpus: &Corpus, question: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_concepts];
        let support = self.params.by_name(&format!("disc.{question}")).unwrap();
        for (i, &c) in corpus.questions[question].concepts.iter().enumerate() {
            out[c] = support.data()[i];
        }
        out
    }

    pub fn intercept(&self, question: usize) -> f64 {
        self.params.by_name("intercept").unwrap().data()[question]
    }
}

impl Trainable for MirtModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Mirt
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
        _ctx: &mut ForwardCtx,
    ) -> Result<RecordGraph> {
        let mut g = Graph::with_capacity(16);
        let trait_id = self.params.id_of(&format!("trait.{}", record.student)).unwrap();
        let disc_id = self.params.id_of(&format!("disc.{}", record.question)).unwrap();
        let int_id = self.params.id_of("intercept").unwrap();

        let traits = g.leaf(Arc::clone(self.params.get(trait_id)))?;
        let disc = g.leaf(Arc::clone(self.params.get(disc_id)))?;
        let intercept = g.leaf(Arc::clone(self.params.get(int_id)))?;

        let support = &corpus.questions[record.question].concepts;
        let th = g.gather(traits, support)?;
        let z = g.dot(disc, th)?;
        let d = g.gather(intercept, &[record.question])?;
        let z = g.add(z, d)?;
        let prob = g.sigmoid(z)?;
        let loss = g.bce(prob, record.score as f64)?;
        Ok(RecordGraph {
            graph: g,
            loss,
            prob,
            params: vec![(trait_id, traits), (disc_id, disc), (int_id, intercept)],
        })
    }

    fn predict_prob(&self, corpus: &Corpus, student: usize, question: usize) -> Result<f64> {
        mirt_predict(
            &self.trait_vector(student),
            &self.discrimination_dense(corpus, question),
            self.intercept(question),
        )
    }
}

/// DINA with per-student mastery (relaxed to (0,1) while fitting,
/// thresholded at 0.5 for prediction and reporting) and per-question
/// slip/guess in (0,1).
pub struct DinaModel {
    params: ParamSet,
}

impl DinaModel {
    pub fn new(corpus: &Corpus) -> Self {
        let mut params = ParamSet::new();
        for s in 0..corpus.n_students() {
            params.register(
                format!("mastery.{s}"),
                Tensor::vector(vec![0.0; corpus.n_concepts()]),
            );
        }
        let start = (0.2f64 / 0.8).ln();
        params.register(
            "slip_raw",
            Tensor::vector(vec![start; corpus.n_questions()]),
        );
        params.register(
            "guess_raw",
            Tensor::vector(vec![start; corpus.n_questions()]),
        );
        DinaModel { params }
    }

    /// Thresholded binary mastery vector for reporting and prediction.
    pub fn mastery(&self, student: usize) -> Vec<bool> {
        self.params
            .by_name(&format!("mastery.{student}"))
            .unwrap()
            .data()
            .iter()
            .map(|&m| sigmoid(m) >= 0.5)
            .collect()
    }

    /// Relaxed mastery values in (0,1).
    pub fn mastery_relaxed(&self, student: usize) -> Vec<f64> {
        self.params
            .by_name(&format!("mastery.{student}"))
            .unwrap()
            .data()
            .iter()
            .map(|&m| sigmoid(m))
            .collect()
    }

    pub fn slip(&self, question: usize) -> f64 {
        sigmoid(self.params.by_name("slip_raw").unwrap().data()[question])
    }

    pub fn guess(&self, question: usize) -> f64 {
        sigmoid(self.params.by_name("guess_raw").unwrap().data()[question])
    }
}

impl Trainable for DinaModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Dina
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
        _ctx: &mut ForwardCtx,
    ) -> Result<RecordGraph> {
        let mut g = Graph::with_capacity(24);
        let mastery_id = self
            .params
            .id_of(&format!("mastery.{}", record.student))
            .unwrap();
        let slip_id = self.params.id_of("slip_raw").unwrap();
        let guess_id = self.params.id_of("guess_raw").unwrap();

        let mastery_raw = g.leaf(Arc::clone(self.params.get(mastery_id)))?;
        let slip_raw = g.leaf(Arc::clone(self.params.get(slip_id)))?;
        let guess_raw = g.leaf(Arc::clone(self.params.get(guess_id)))?;

        let mastery = g.sigmoid(mastery_raw)?;
        let support = &corpus.questions[record.question].concepts;
        // conjunctive gate relaxed to a product over required concepts
        let mut eta = g.gather(mastery, &support[..1])?;
        for &c in &support[1..] {
            let m = g.gather(mastery, &[c])?;
            eta = g.mul(eta, m)?;
        }

        let s = g.gather(slip_raw, &[record.question])?;
        let s = g.sigmoid(s)?;
        let gu = g.gather(guess_raw, &[record.question])?;
        let gu = g.sigmoid(gu)?;

        let one = g.scalar(1.0)?;
        let rest = g.sub(one, s)?;
        let rest = g.sub(rest, gu)?; // 1 - slip - guess
        let gated = g.mul(rest, eta)?;
        let prob = g.add(gu, gated)?;
        let loss = g.bce(prob, record.score as f64)?;
        Ok(RecordGraph {
            graph: g,
            loss,
            prob,
            params: vec![
                (mastery_id, mastery_raw),
                (slip_id, slip_raw),
                (guess_id, guess_raw),
            ],
        })
    }

    /// Evaluation uses the discrete gate over thresholded mastery.
    fn predict_prob(&self, corpus: &Corpus, student: usize, question: usize) -> Result<f64> {
        dina_predict(
            &self.mastery(student),
            &corpus.questions[question].concepts,
            self.slip(question),
            self.guess(question),
        )
    }
}

/// Wrapper over the three baselines so callers can fit by kind.
pub enum ClassicalModel {
    Irt(IrtModel),
    Mirt(MirtModel),
    Dina(DinaModel),
}

/// Fit a classical baseline on the training records by gradient MLE.
pub fn fit(
    kind: ModelKind,
    corpus: &Corpus,
    train_records: &[ResponseRecord],
    cfg: &TrainConfig,
) -> Result<(ClassicalModel, TrainReport)> {
    // classical likelihoods have no dropout surface
    let cfg = TrainConfig {
        dropout: 0.0,
        ..cfg.clone()
    };
    match kind {
        ModelKind::Irt => {
            let mut m = IrtModel::new(corpus);
            let r = train(&mut m, corpus, train_records, &cfg)?;
            Ok((ClassicalModel::Irt(m), r))
        }
        ModelKind::Mirt => {
            let mut m = MirtModel::new(corpus);
            let r = train(&mut m, corpus, train_records, &cfg)?;
            Ok((ClassicalModel::Mirt(m), r))
        }
        ModelKind::Dina => {
            let mut m = DinaModel::new(corpus);
            let r = train(&mut m, corpus, train_records, &cfg)?;
            Ok((ClassicalModel::Dina(m), r))
        }
        other => Err(Error::Config(format!(
            "fit() covers classical baselines, not {other}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn irt_predict_hand_values() {
        assert_eq!(irt_predict(0.7, 1.3, 0.7), 0.5);
        assert_eq!(irt_predict(2.0, 0.0, -1.0), 0.5);
        let p = irt_predict(1.0, 1.0, 0.0);
        assert!((p - 0.8455347349164652).abs() < 1e-12, "p {p}");
    }

    #[test]
    fn irt_odd_symmetry() {
        for &(t, a, b) in &[(0.3, 1.2, -0.8), (-2.0, 0.5, 1.5), (1.0, 3.9, 3.9)] {
            let s = irt_predict(t, a, b) + irt_predict(-t, a, -b);
            assert!((s - 1.0).abs() < 1e-12, "{t} {a} {b} -> {s}");
        }
    }

    #[test]
    fn irt_theta_slope_has_sign_of_a() {
        let h = 1e-6;
        for &a in &[1.5, -2.0, 0.25] {
            let d = (irt_predict(0.2 + h, a, -0.3) - irt_predict(0.2 - h, a, -0.3)) / (2.0 * h);
            assert_eq!(d.signum(), a.signum(), "a = {a}");
        }
    }

    #[test]
    fn mirt_predict_hand_values() {
        assert_eq!(mirt_predict(&[1.0, -1.0], &[1.0, 1.0], 0.0).unwrap(), 0.5);
        assert_eq!(mirt_predict(&[5.0, 2.0], &[0.0, 0.0], 0.0).unwrap(), 0.5);
        let p = mirt_predict(&[1.0, 2.0], &[0.5, -0.25], 0.1).unwrap();
        assert!((p - 0.5249791874789399).abs() < 1e-12, "p {p}");
        assert!(mirt_predict(&[1.0], &[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn dina_predict_gate() {
        assert_eq!(
            dina_predict(&[true, true], &[0, 1], 0.1, 0.2).unwrap(),
            0.9
        );
        assert_eq!(
            dina_predict(&[true, false], &[0, 1], 0.1, 0.2).unwrap(),
            0.2
        );
        // 3 required, 2 mastered -> guess
        assert_eq!(
            dina_predict(&[true, true, false], &[0, 1, 2], 0.1, 0.25).unwrap(),
            0.25
        );
        assert!(dina_predict(&[true], &[], 0.1, 0.2).is_err());
    }

    #[test]
    fn bounded_range_stays_inside() {
        // strict up to the f64 saturation point of the sigmoid (~|x| > 37)
        for &x in &[-30.0, -3.0, 0.0, 2.5, 30.0] {
            let y = bounded_range(x);
            assert!(y > -4.0 && y < 4.0, "{x} -> {y}");
        }
        // asymptote: far outside, the transform pins to the boundary
        assert!((bounded_range(50.0) - 4.0).abs() < 1e-9);
        assert!((bounded_range(bounded_range_inv(2.7)) - 2.7).abs() < 1e-12);
    }

    fn corpus(records: &[(&str, &str, u8)], questions: &[(&str, &str)]) -> Corpus {
        let dir = tempfile::tempdir().unwrap();
        let mut qf = std::fs::File::create(dir.path().join(crate::data::QUESTIONS_FILE)).unwrap();
        for (id, concepts) in questions {
            writeln!(qf, "{id}\t1 2 3\t{concepts}").unwrap();
        }
        let mut rf = std::fs::File::create(dir.path().join(crate::data::RECORDS_FILE)).unwrap();
        for (s, q, r) in records {
            writeln!(rf, "{s}\t{q}\t{r}").unwrap();
        }
        let mut ef = std::fs::File::create(dir.path().join(crate::data::EMBEDDINGS_FILE)).unwrap();
        writeln!(ef, "3 4").unwrap();
        for t in 1..=3 {
            writeln!(ef, "{t} 0.1 -0.2 0.3 0.05").unwrap();
        }
        crate::data::load_corpus_dir(dir.path()).unwrap()
    }

    #[test]
    fn mirt_gradient_outside_support_is_zero() {
        let c = corpus(
            &[("s1", "q1", 1)],
            &[("q1", "k1,k3"), ("q2", "k2")],
        );
        let m = MirtModel::new(&c);
        let rg = m
            .build_record_loss(&c, &c.records[0], &mut ForwardCtx::infer())
            .unwrap();
        let grads = rg.graph.backward(rg.loss).unwrap();
        let (tid, tnode) = rg.params[0];
        assert_eq!(m.params.name(tid), "trait.0");
        let tg = &grads[tnode.0];
        // first-appearance indexing: k1 -> 0, k3 -> 1, k2 -> 2;
        // q1's support is {0, 1}, so index 2 must stay untouched
        assert_eq!(tg.data()[2], 0.0);
        assert!(tg.data()[0] != 0.0 && tg.data()[1] != 0.0);
    }

    #[test]
    fn single_positive_record_pushes_probability_up() {
        let c = corpus(&[("s1", "q1", 1)], &[("q1", "k1")]);
        let cfg = TrainConfig {
            max_epochs: 60,
            patience: 60,
            learning_rate: 0.1,
            seed: 5,
            ..TrainConfig::default()
        };
        for kind in [ModelKind::Irt, ModelKind::Mirt, ModelKind::Dina] {
            let (model, _) = fit(kind, &c, &c.records, &cfg).unwrap();
            let p = match &model {
                ClassicalModel::Irt(m) => m.predict_prob(&c, 0, 0).unwrap(),
                ClassicalModel::Mirt(m) => m.predict_prob(&c, 0, 0).unwrap(),
                ClassicalModel::Dina(m) => m.predict_prob(&c, 0, 0).unwrap(),
            };
            assert!(p > 0.5, "{kind}: p {p}");
        }
    }

    #[test]
    fn identical_students_get_identical_traits() {
        // two students with the same record sets, full-batch fitting
        let mut records = Vec::new();
        for q in 1..=4 {
            for s in ["s1", "s2"] {
                records.push((s, ["q1", "q2", "q3", "q4"][q - 1], u8::from(q <= 2)));
            }
        }
        let recs: Vec<(&str, &str, u8)> = records;
        let c = corpus(
            &recs,
            &[("q1", "k1"), ("q2", "k1"), ("q3", "k2"), ("q4", "k2")],
        );
        let cfg = TrainConfig {
            max_epochs: 40,
            patience: 40,
            batch_size: 1000,
            learning_rate: 0.05,
            validation_fraction: 0.0,
            seed: 2,
            ..TrainConfig::default()
        };
        let mut m = IrtModel::new(&c);
        train(&mut m, &c, &c.records, &cfg).unwrap();
        let (t1, t2) = (m.theta(0), m.theta(1));
        assert!((t1 - t2).abs() < 1e-6, "{t1} vs {t2}");
    }

    #[test]
    fn fitted_ranges_stay_bounded_through_updates() {
        let c = corpus(
            &[("s1", "q1", 1), ("s1", "q2", 0), ("s2", "q1", 1), ("s2", "q2", 1)],
            &[("q1", "k1"), ("q2", "k2")],
        );
        let cfg = TrainConfig {
            max_epochs: 25,
            patience: 25,
            learning_rate: 0.5,
            seed: 0,
            ..TrainConfig::default()
        };
        let (model, _) = fit(ModelKind::Irt, &c, &c.records, &cfg).unwrap();
        if let ClassicalModel::Irt(m) = model {
            for q in 0..2 {
                let (a, b) = (m.discrimination(q), m.difficulty(q));
                assert!(a > -4.0 && a < 4.0);
                assert!(b > -4.0 && b < 4.0);
            }
        }
    }

    #[test]
    fn graph_predictions_match_closed_form() {
        let c = corpus(
            &[("s1", "q1", 1), ("s2", "q2", 0)],
            &[("q1", "k1,k2"), ("q2", "k2")],
        );
        let irt = IrtModel::new(&c);
        let rg = irt
            .build_record_loss(&c, &c.records[0], &mut ForwardCtx::infer())
            .unwrap();
        let graph_p = rg.graph.value(rg.prob).item();
        let direct = irt.predict_prob(&c, 0, 0).unwrap();
        assert!((graph_p - direct).abs() < 1e-15);

        let dina = DinaModel::new(&c);
        let rg = dina
            .build_record_loss(&c, &c.records[0], &mut ForwardCtx::infer())
            .unwrap();
        // relaxed prediction at init: mastery 0.5 each, slip=guess=0.2
        let eta = 0.25;
        let expect = 0.2 + (1.0 - 0.4) * eta;
        assert!((rg.graph.value(rg.prob).item() - expect).abs() < 1e-12);
    }
}
