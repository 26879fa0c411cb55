//! Shared optimization loop: initialization, mini-batching, Adam updates,
//! dropout mode switching, early stopping, and deterministic seeding.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, ResponseRecord};
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::{Graph, NodeId};
use crate::metrics::compute_metrics;
use crate::params::{ParamId, ParamSet};
use crate::seeding::{rng_for, TAG_DROPOUT, TAG_SHUFFLE, TAG_VAL_SPLIT};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    Dirt,
    Dirtna,
    Irt,
    Mirt,
    Dina,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Dirt,
        ModelKind::Dirtna,
        ModelKind::Irt,
        ModelKind::Mirt,
        ModelKind::Dina,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Dirt => "dirt",
            ModelKind::Dirtna => "dirtna",
            ModelKind::Irt => "irt",
            ModelKind::Mirt => "mirt",
            ModelKind::Dina => "dina",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dirt" => Ok(ModelKind::Dirt),
            "dirtna" => Ok(ModelKind::Dirtna),
            "irt" => Ok(ModelKind::Irt),
            "mirt" => Ok(ModelKind::Mirt),
            "dina" => Ok(ModelKind::Dina),
            other => Err(Error::Config(format!(
                "unknown model kind {other}; expected dirt|dirtna|irt|mirt|dina"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Share of train records held out for early stopping; 0 disables the
    /// holdout and early stopping watches the train loss instead.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout: 0.2,
            max_epochs: 30,
            patience: 5,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must be in [0,1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    /// Key-value echo used in checkpoints and config files.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("batch_size".into(), self.batch_size.to_string()),
            ("learning_rate".into(), format!("{}", self.learning_rate)),
            ("beta1".into(), format!("{}", self.beta1)),
            ("beta2".into(), format!("{}", self.beta2)),
            ("epsilon".into(), format!("{}", self.epsilon)),
            ("dropout".into(), format!("{}", self.dropout)),
            ("max_epochs".into(), self.max_epochs.to_string()),
            ("patience".into(), self.patience.to_string()),
            (
                "validation_fraction".into(),
                format!("{}", self.validation_fraction),
            ),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| Error::Config(format!("bad value {v} for {k}"));
        match key {
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key, value))?,
            "learning_rate" | "lr" => {
                self.learning_rate = value.parse().map_err(|_| bad(key, value))?
            }
            "beta1" => self.beta1 = value.parse().map_err(|_| bad(key, value))?,
            "beta2" => self.beta2 = value.parse().map_err(|_| bad(key, value))?,
            "epsilon" => self.epsilon = value.parse().map_err(|_| bad(key, value))?,
            "dropout" => self.dropout = value.parse().map_err(|_| bad(key, value))?,
            "max_epochs" | "epochs" => {
                self.max_epochs = value.parse().map_err(|_| bad(key, value))?
            }
            "patience" => self.patience = value.parse().map_err(|_| bad(key, value))?,
            "validation_fraction" => {
                self.validation_fraction = value.parse().map_err(|_| bad(key, value))?
            }
            "seed" => self.seed = value.parse().map_err(|_| bad(key, value))?,
            other => return Err(Error::Config(format!("unknown training key {other}"))),
        }
        Ok(())
    }
}

/// Glorot-range uniform initialization: i.i.d. samples from
/// `(-sqrt(6/(n_in+n_out)), sqrt(6/(n_in+n_out)))` where the fan sizes
/// are the last two extents (vectors use n_out = 1).
pub fn glorot_uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, &[]);
    glorot_uniform_with(shape, &mut rng)
}

pub fn glorot_uniform_with(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let (n_in, n_out) = match shape.len() {
        0 => (1, 1),
        1 => (shape[0], 1),
        n => (shape[n - 2], shape[n - 1]),
    };
    let bound = (6.0 / (n_in + n_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data consistent by construction")
}

/// First and second moment estimates, parallel to a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(params.get(i).shape()))
            .collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One Adam update with bias correction. Parameters without a gradient
/// this step are treated as having a zero gradient.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for id in 0..params.len() {
        if let Some(g) = grads.get(id).and_then(|g| g.as_ref()) {
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient of parameter group {}", params.name(id)),
                });
            }
        }
        let zero;
        let g = match grads.get(id).and_then(|g| g.as_ref()) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(params.get(id).shape());
                &zero
            }
        };
        let md = state.m[id].data_mut();
        for (m, &gi) in md.iter_mut().zip(g.data()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
        }
        let vd = state.v[id].data_mut();
        for (v, &gi) in vd.iter_mut().zip(g.data()) {
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
        }
        let (md, vd) = (state.m[id].data(), state.v[id].data());
        let (lr, eps) = (cfg.learning_rate, cfg.epsilon);
        params.apply(id, |p| {
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-record forward context: dropout is sampled from `rng` only in
/// train mode.
pub struct ForwardCtx {
    pub mode: Mode,
    pub dropout: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn infer() -> Self {
        ForwardCtx {
            mode: Mode::Infer,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: ChaCha8Rng) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            dropout,
            rng: Some(rng),
        }
    }

    /// Apply dropout to a node if the context calls for it.
    pub fn dropout_node(&mut self, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
        match (self.mode, self.rng.as_mut()) {
            (Mode::Train, Some(rng)) if self.dropout > 0.0 => graph.dropout(x, self.dropout, rng),
            _ => Ok(x),
        }
    }
}

/// Loss graph for one response record.
pub struct RecordGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub prob: NodeId,
    /// Parameter leaves present in this graph.
    pub params: Vec<(ParamId, NodeId)>,
}

/// A model that can be fitted by the shared loop.
pub trait Trainable {
    fn kind(&self) -> ModelKind;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Build the per-record loss graph (negative log-likelihood of the
    /// observed score under the model's predicted probability).
    fn build_record_loss(
        &self,
        corpus: &Corpus,
        record: &ResponseRecord,
        ctx: &mut ForwardCtx,
    ) -> Result<RecordGraph>;

    /// Inference-mode probability of a correct response.
    fn predict_prob(&self, corpus: &Corpus, student: usize, question: usize) -> Result<f64> {
        let rec = ResponseRecord {
            student,
            question,
            score: 1,
        };
        let rg = self.build_record_loss(corpus, &rec, &mut ForwardCtx::infer())?;
        Ok(rg.graph.value(rg.prob).item())
    }

    /// Record which students had training evidence.
    fn note_trained_students(&mut self, _seen: &[bool]) {}
}

/// Mean loss and accumulated gradients over a batch of records.
///
/// Per-record graphs are built independently (each with its own derived
/// dropout stream) and reduced in record order, so the result does not
/// depend on the execution strategy.
pub fn batch_gradients<M: Trainable + Sync>(
    model: &M,
    corpus: &Corpus,
    batch: &[(usize, ResponseRecord)],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let per_record = exec::map(batch, |(pos, rec)| -> Result<_> {
        let rng = rng_for(cfg.seed, &[TAG_DROPOUT, epoch as u64, *pos as u64]);
        let mut ctx = ForwardCtx::train(cfg.dropout, rng);
        let rg = model.build_record_loss(corpus, rec, &mut ctx)?;
        let mut grads = rg.graph.backward(rg.loss)?;
        let contributions: Vec<(ParamId, Tensor)> = rg
            .params
            .iter()
            .map(|&(pid, nid)| {
                let g = std::mem::replace(&mut grads[nid.0], Tensor::zeros(&[1]));
                (pid, g)
            })
            .collect();
        Ok((rg.graph.value(rg.loss).item(), contributions))
    });

    let scale = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;
    let mut acc: Vec<Option<Tensor>> = vec![None; model.params().len()];
    for item in per_record {
        let (loss, contributions) = item?;
        total_loss += loss;
        for (pid, g) in contributions {
            match &mut acc[pid] {
                Some(t) => {
                    for (dst, &src) in t.data_mut().iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
    }
    for g in acc.iter_mut().flatten() {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    Ok((total_loss * scale, acc))
}

/// Mean inference-mode loss plus predictions over a record set.
pub fn evaluate_loss<M: Trainable + Sync>(
    model: &M,
    corpus: &Corpus,
    records: &[ResponseRecord],
) -> Result<(f64, Vec<f64>)> {
    let out = exec::map(records, |rec| -> Result<(f64, f64)> {
        let rg = model.build_record_loss(corpus, rec, &mut ForwardCtx::infer())?;
        Ok((
            rg.graph.value(rg.loss).item(),
            rg.graph.value(rg.prob).item(),
        ))
    });
    let mut losses = 0.0;
    let mut preds = Vec::with_capacity(records.len());
    for item in out {
        let (l, p) = item?;
        losses += l;
        preds.push(p);
    }
    Ok((losses / records.len().max(1) as f64, preds))
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub wall_secs: f64,
}

impl TrainReport {
    /// Line-oriented log: `epoch<TAB>train_loss<TAB>val_loss<TAB>val_auc`.
    pub fn write_log<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.epochs {
            let auc = e
                .val_auc
                .map_or_else(|| "na".to_string(), |a| format!("{a:.6}"));
            writeln!(
                w,
                "{}\t{:.6}\t{:.6}\t{}",
                e.epoch, e.train_loss, e.val_loss, auc
            )?;
        }
        Ok(())
    }
}

/// Fit a model on the training records with shuffled mini-batches, Adam,
/// and early stopping on a held-out slice of train. The parameters that
/// scored the best validation loss are restored at the end.
pub fn train<M: Trainable + Sync>(
    model: &mut M,
    corpus: &Corpus,
    train_records: &[ResponseRecord],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_records.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let start = Instant::now();

    let mut seen = vec![false; corpus.n_students()];
    for r in train_records {
        seen[r.student] = true;
    }
    model.note_trained_students(&seen);

    // Hold out a slice of train (seeded) for early stopping.
    let mut idx: Vec<usize> = (0..train_records.len()).collect();
    idx.shuffle(&mut rng_for(cfg.seed, &[TAG_VAL_SPLIT]));
    let n_val = if cfg.validation_fraction > 0.0 && train_records.len() >= 2 {
        ((train_records.len() as f64 * cfg.validation_fraction) as usize).max(1)
    } else {
        0
    };
    let val: Vec<ResponseRecord> = idx[..n_val].iter().map(|&i| train_records[i]).collect();
    let fit: Vec<ResponseRecord> = idx[n_val..].iter().map(|&i| train_records[i]).collect();

    let mut state = AdamState::new(model.params());
    let mut report = TrainReport {
        epochs: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
        wall_secs: 0.0,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<Vec<f64>> = None;
    let mut bad_epochs = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..fit.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, ResponseRecord)> =
                chunk.iter().map(|&i| (i, fit[i])).collect();
            let (loss, grads) = batch_gradients(model, corpus, &batch, cfg, epoch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    msg: format!(
                        "batch loss became non-finite (last epoch mean {:.6})",
                        report.epochs.last().map_or(f64::NAN, |e| e.train_loss)
                    ),
                });
            }
            adam_step(model.params_mut(), &grads, &mut state, cfg)?;
            epoch_loss += loss * batch.len() as f64;
        }
        let train_loss = epoch_loss / fit.len() as f64;

        let (val_loss, val_auc) = if val.is_empty() {
            (train_loss, None)
        } else {
            let (loss, preds) = evaluate_loss(model, corpus, &val)?;
            let labels: Vec<u8> = val.iter().map(|r| r.score).collect();
            let auc = compute_metrics(&preds, &labels, "val")
                .ok()
                .and_then(|m| m.auc);
            (loss, auc)
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                msg: "validation loss became non-finite".into(),
            });
        }

        report.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_auc,
        });
        report.stopped_epoch = epoch;
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} auc {val_auc:?}");

        if val_loss < best_val {
            best_val = val_loss;
            best_params = Some(model.params().flatten());
            report.best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                break;
            }
        }
    }

    if let Some(best) = best_params {
        model.params_mut().load_flat(&best)?;
    }
    report.wall_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn glorot_respects_range_and_seed() {
        let t = glorot_uniform(&[10, 10], 42);
        let bound = (6.0f64 / 20.0).sqrt();
        assert!((bound - 0.5477225575051661).abs() < 1e-15);
        assert!(t.data().iter().all(|&v| v > -bound && v < bound));
        assert_eq!(t.data(), glorot_uniform(&[10, 10], 42).data());
        assert_ne!(t.data(), glorot_uniform(&[10, 10], 43).data());
    }

    #[test]
    fn glorot_mean_near_zero() {
        let t = glorot_uniform(&[100, 100], 7);
        let mean: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn glorot_vector_uses_unit_fan_out() {
        let t = glorot_uniform(&[50], 1);
        let bound = (6.0f64 / 51.0).sqrt();
        assert!(t.data().iter().all(|&v| v.abs() < bound));
    }

    fn one_param_set(x: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.register("w", Tensor::scalar(x));
        ps
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut ps = one_param_set(1.25);
        let mut state = AdamState::new(&ps);
        let cfg = TrainConfig::default();
        for _ in 0..10 {
            adam_step(&mut ps, &[Some(Tensor::scalar(0.0))], &mut state, &cfg).unwrap();
        }
        assert_eq!(ps.by_name("w").unwrap().item(), 1.25);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut ps = one_param_set(0.0);
        let mut state = AdamState::new(&ps);
        let cfg = TrainConfig::default();
        adam_step(&mut ps, &[Some(Tensor::scalar(3.7))], &mut state, &cfg).unwrap();
        let moved = ps.by_name("w").unwrap().item();
        assert!(
            (moved.abs() - cfg.learning_rate).abs() < 1e-6,
            "step {moved}"
        );
        assert!(moved < 0.0);
    }

    #[test]
    fn adam_descends_quadratic() {
        // f(w) = (w - 3)^2, gradient 2(w - 3)
        let mut ps = one_param_set(0.0);
        let mut state = AdamState::new(&ps);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let loss = |w: f64| (w - 3.0) * (w - 3.0);
        let w0 = ps.by_name("w").unwrap().item();
        for _ in 0..2 {
            let w = ps.by_name("w").unwrap().item();
            adam_step(
                &mut ps,
                &[Some(Tensor::scalar(2.0 * (w - 3.0)))],
                &mut state,
                &cfg,
            )
            .unwrap();
        }
        assert!(loss(ps.by_name("w").unwrap().item()) < loss(w0));
    }

    #[test]
    fn adam_rejects_nan_gradient_naming_group() {
        let mut ps = one_param_set(0.0);
        let mut state = AdamState::new(&ps);
        let err = adam_step(
            &mut ps,
            &[Some(Tensor::scalar(f64::NAN))],
            &mut state,
            &TrainConfig::default(),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains('w'), "{err}");
    }

    /// Minimal model: a single logit shared by every record.
    struct BiasModel {
        params: ParamSet,
    }

    impl BiasModel {
        fn new() -> Self {
            let mut params = ParamSet::new();
            params.register("logit", Tensor::scalar(0.0));
            BiasModel { params }
        }
    }

    impl Trainable for BiasModel {
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
            let mut graph = Graph::new();
            let w = graph.leaf(Arc::clone(self.params.by_name("logit")?))?;
            let p = graph.sigmoid(w)?;
            let loss = graph.bce(p, record.score as f64)?;
            Ok(RecordGraph {
                graph,
                loss,
                prob: p,
                params: vec![(0, w)],
            })
        }
    }

    fn toy_corpus() -> Corpus {
        let dir = tempfile::tempdir().unwrap();
        use std::io::Write as _;
        let mut qf = std::fs::File::create(dir.path().join(crate::data::QUESTIONS_FILE)).unwrap();
        writeln!(qf, "q1\t1 2\tka").unwrap();
        let mut rf = std::fs::File::create(dir.path().join(crate::data::RECORDS_FILE)).unwrap();
        for s in 0..4 {
            for k in 0..5 {
                writeln!(rf, "s{s}\tq1\t{}", usize::from(k < 4)).unwrap();
            }
        }
        let mut ef = std::fs::File::create(dir.path().join(crate::data::EMBEDDINGS_FILE)).unwrap();
        writeln!(ef, "2 2").unwrap();
        writeln!(ef, "1 0.1 0.2").unwrap();
        writeln!(ef, "2 0.3 0.4").unwrap();
        crate::data::load_corpus_dir(dir.path()).unwrap()
    }

    #[test]
    fn train_descends_and_is_deterministic() {
        let corpus = toy_corpus();
        let cfg = TrainConfig {
            max_epochs: 5,
            learning_rate: 0.05,
            dropout: 0.0,
            patience: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut m1 = BiasModel::new();
        let r1 = train(&mut m1, &corpus, &corpus.records, &cfg).unwrap();
        assert!(r1.epochs[4].train_loss < r1.epochs[0].train_loss);

        let mut m2 = BiasModel::new();
        let r2 = train(&mut m2, &corpus, &corpus.records, &cfg).unwrap();
        assert_eq!(m1.params.flatten(), m2.params.flatten());
        assert_eq!(r1.epochs.len(), r2.epochs.len());
        // 80% of records are correct; fitted probability should head there
        let p = m1.predict_prob(&corpus, 0, 0).unwrap();
        assert!(p > 0.5, "p {p}");
    }

    #[test]
    fn patience_zero_stops_at_first_non_improvement() {
        let corpus = toy_corpus();
        // Large learning rate so validation loss oscillates quickly.
        let cfg = TrainConfig {
            max_epochs: 50,
            learning_rate: 1.5,
            dropout: 0.0,
            patience: 0,
            seed: 1,
            ..TrainConfig::default()
        };
        let mut m = BiasModel::new();
        let report = train(&mut m, &corpus, &corpus.records, &cfg).unwrap();
        assert!(
            report.stopped_epoch < 50,
            "ran {} epochs",
            report.stopped_epoch
        );
        assert_eq!(report.best_epoch + 1, report.stopped_epoch);
    }

    #[test]
    fn inference_ignores_dropout_setting() {
        let corpus = toy_corpus();
        let m = BiasModel::new();
        let rec = corpus.records[0];
        let a = {
            let rg = m
                .build_record_loss(&corpus, &rec, &mut ForwardCtx::infer())
                .unwrap();
            rg.graph.value(rg.prob).item()
        };
        let mut ctx = ForwardCtx {
            mode: Mode::Infer,
            dropout: 0.9,
            rng: None,
        };
        let b = {
            let rg = m.build_record_loss(&corpus, &rec, &mut ctx).unwrap();
            rg.graph.value(rg.prob).item()
        };
        assert_eq!(a, b);
    }
}
