//! Experiment protocols: the train-ratio sparsity sweep and the
//! rare-question robustness comparison, plus the result table formats.

use std::io::Write;

use serde::Serialize;

use crate::classical::{DinaModel, IrtModel, MirtModel};
use crate::data::{rare_question_subset, split_records, Corpus, DatasetSplit, ResponseRecord};
use crate::deep::{DirtConfig, DirtModel};
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{compute_metrics, MetricsReport};
use crate::train::{train, ModelKind, TrainConfig, TrainReport, Trainable};

/// A fitted model of any kind, with uniform prediction dispatch.
pub enum AnyModel {
    Dirt(DirtModel),
    Irt(IrtModel),
    Mirt(MirtModel),
    Dina(DinaModel),
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Dirt(m) => m.kind(),
            AnyModel::Irt(m) => m.kind(),
            AnyModel::Mirt(m) => m.kind(),
            AnyModel::Dina(m) => m.kind(),
        }
    }

    pub fn predict_prob(&self, corpus: &Corpus, student: usize, question: usize) -> Result<f64> {
        match self {
            AnyModel::Dirt(m) => m.predict_prob(corpus, student, question),
            AnyModel::Irt(m) => m.predict_prob(corpus, student, question),
            AnyModel::Mirt(m) => m.predict_prob(corpus, student, question),
            AnyModel::Dina(m) => m.predict_prob(corpus, student, question),
        }
    }

    pub fn params(&self) -> &crate::params::ParamSet {
        match self {
            AnyModel::Dirt(m) => m.params(),
            AnyModel::Irt(m) => m.params(),
            AnyModel::Mirt(m) => m.params(),
            AnyModel::Dina(m) => m.params(),
        }
    }
}

/// Construct and fit a model of the requested kind.
pub fn train_any(
    kind: ModelKind,
    corpus: &Corpus,
    train_records: &[ResponseRecord],
    cfg: &TrainConfig,
    dirt_cfg: &DirtConfig,
) -> Result<(AnyModel, TrainReport)> {
    match kind {
        ModelKind::Dirt | ModelKind::Dirtna => {
            let mut config = dirt_cfg.clone();
            config.attention = kind == ModelKind::Dirt;
            let mut m = DirtModel::new(corpus, config, cfg.seed)?;
            let r = train(&mut m, corpus, train_records, cfg)?;
            Ok((AnyModel::Dirt(m), r))
        }
        ModelKind::Irt => {
            let mut m = IrtModel::new(corpus);
            let r = train(&mut m, corpus, train_records, &no_dropout(cfg))?;
            Ok((AnyModel::Irt(m), r))
        }
        ModelKind::Mirt => {
            let mut m = MirtModel::new(corpus);
            let r = train(&mut m, corpus, train_records, &no_dropout(cfg))?;
            Ok((AnyModel::Mirt(m), r))
        }
        ModelKind::Dina => {
            let mut m = DinaModel::new(corpus);
            let r = train(&mut m, corpus, train_records, &no_dropout(cfg))?;
            Ok((AnyModel::Dina(m), r))
        }
    }
}

fn no_dropout(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        dropout: 0.0,
        ..cfg.clone()
    }
}

/// Probabilities for a record batch, fanned out across threads.
pub fn batch_predict(
    model: &AnyModel,
    corpus: &Corpus,
    records: &[ResponseRecord],
) -> Result<Vec<f64>> {
    exec::map(records, |r| {
        model.predict_prob(corpus, r.student, r.question)
    })
    .into_iter()
    .collect()
}

/// Metrics of a model over a record set.
pub fn eval_records(
    model: &AnyModel,
    corpus: &Corpus,
    records: &[ResponseRecord],
    label: &str,
) -> Result<MetricsReport> {
    let preds = batch_predict(model, corpus, records)?;
    let labels: Vec<u8> = records.iter().map(|r| r.score).collect();
    compute_metrics(&preds, &labels, label)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub model: ModelKind,
    pub protocol: String,
    pub param: String,
    /// Absent when the protocol produced an empty record subset.
    pub metrics: Option<MetricsReport>,
}

/// Train each model kind at every split ratio (nested splits share one
/// shuffle) and evaluate on the held-out test records.
pub fn sparsity_sweep(
    kinds: &[ModelKind],
    corpus: &Corpus,
    ratios: &[f64],
    seed: u64,
    cfg: &TrainConfig,
    dirt_cfg: &DirtConfig,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for &ratio in ratios {
        if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
            return Err(Error::Config(format!("sweep ratio {ratio} outside (0,1)")));
        }
        let split = split_records(&corpus.records, ratio, seed)?;
        for &kind in kinds {
            log::info!("sweep: training {kind} at ratio {ratio}");
            let (model, _) = train_any(kind, corpus, &split.train, cfg, dirt_cfg)?;
            let metrics = eval_records(&model, corpus, &split.test, &format!("ratio={ratio}"))?;
            rows.push(EvalRow {
                model: kind,
                protocol: "sweep".into(),
                param: format!("{ratio}"),
                metrics: Some(metrics),
            });
        }
    }
    Ok(rows)
}

/// Evaluate one fitted model on the rare-question subsets of a split.
pub fn rare_subset_rows(
    model: &AnyModel,
    corpus: &Corpus,
    split: &DatasetSplit,
    caps: &[usize],
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for &cap in caps {
        let subset = rare_question_subset(split, cap);
        let metrics = if subset.is_empty() {
            None
        } else {
            Some(eval_records(
                model,
                corpus,
                &subset,
                &format!("cap={cap}"),
            )?)
        };
        rows.push(EvalRow {
            model: model.kind(),
            protocol: "rare".into(),
            param: cap.to_string(),
            metrics,
        });
    }
    Ok(rows)
}

/// Train each kind on the split's train records and evaluate it on the
/// rare-question subsets per occurrence cap.
pub fn rare_question_eval(
    kinds: &[ModelKind],
    corpus: &Corpus,
    split: &DatasetSplit,
    caps: &[usize],
    cfg: &TrainConfig,
    dirt_cfg: &DirtConfig,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for &kind in kinds {
        log::info!("rare protocol: training {kind}");
        let (model, _) = train_any(kind, corpus, &split.train, cfg, dirt_cfg)?;
        rows.extend(rare_subset_rows(&model, corpus, split, caps)?);
    }
    Ok(rows)
}

/// Tab-separated table:
/// `model<TAB>protocol<TAB>param<TAB>rmse<TAB>mae<TAB>auc<TAB>acc<TAB>n`.
pub fn write_table<W: Write>(rows: &[EvalRow], mut w: W) -> Result<()> {
    writeln!(w, "model\tprotocol\tparam\trmse\tmae\tauc\tacc\tn")?;
    for row in rows {
        match &row.metrics {
            Some(m) => {
                let auc = m
                    .auc
                    .map_or_else(|| "na".to_string(), |a| format!("{a:.6}"));
                writeln!(
                    w,
                    "{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{:.6}\t{}",
                    row.model, row.protocol, row.param, m.rmse, m.mae, auc, m.acc, m.n
                )?;
            }
            None => writeln!(
                w,
                "{}\t{}\t{}\tna\tna\tna\tna\t0",
                row.model, row.protocol, row.param
            )?,
        }
    }
    Ok(())
}

pub fn write_json<W: Write>(rows: &[EvalRow], w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, rows)
        .map_err(|e| Error::InvalidInput(format!("serializing results: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{generate, GenConfig, GenMode};

    fn gen_corpus(mode: GenMode, seed: u64) -> Corpus {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            n_students: 40,
            n_questions: 80,
            n_concepts: 6,
            vocab_size: 150,
            word_dim: 8,
            mean_records_per_student: 30.0,
            min_records_per_student: 12,
            mode,
            seed,
            ..GenConfig::default()
        };
        generate(&cfg, dir.path()).unwrap();
        crate::data::load_corpus_dir(dir.path()).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            max_epochs: 8,
            patience: 8,
            learning_rate: 0.05,
            seed: 13,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sweep_emits_one_row_per_model_and_ratio() {
        let corpus = gen_corpus(GenMode::Irt, 1);
        let rows = sparsity_sweep(
            &[ModelKind::Irt],
            &corpus,
            &[0.6, 0.9],
            7,
            &quick_cfg(),
            &DirtConfig::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            let m = row.metrics.as_ref().unwrap();
            assert!(m.n > 0);
            assert!(m.rmse <= 1.0 && m.mae <= 1.0);
            assert!(m.auc.is_some());
        }
    }

    #[test]
    fn fitted_irt_scores_train_at_least_as_well_as_test() {
        let corpus = gen_corpus(GenMode::Irt, 2);
        let split = split_records(&corpus.records, 0.8, 3).unwrap();
        let cfg = TrainConfig {
            max_epochs: 30,
            patience: 30,
            learning_rate: 0.1,
            seed: 4,
            ..TrainConfig::default()
        };
        let (model, _) = train_any(
            ModelKind::Irt,
            &corpus,
            &split.train,
            &cfg,
            &DirtConfig::default(),
        )
        .unwrap();
        let on_train = eval_records(&model, &corpus, &split.train, "train").unwrap();
        let on_test = eval_records(&model, &corpus, &split.test, "test").unwrap();
        assert!(
            on_train.auc.unwrap() >= on_test.auc.unwrap(),
            "train {} vs test {}",
            on_train.auc.unwrap(),
            on_test.auc.unwrap()
        );
    }

    #[test]
    fn rare_rows_absent_on_dense_corpus() {
        let corpus = gen_corpus(GenMode::Irt, 5);
        let split = split_records(&corpus.records, 0.9, 11).unwrap();
        let (model, _) = train_any(
            ModelKind::Irt,
            &corpus,
            &split.train,
            &quick_cfg(),
            &DirtConfig::default(),
        )
        .unwrap();
        let rows = rare_subset_rows(&model, &corpus, &split, &[1, 2, 3, 4]).unwrap();
        assert_eq!(rows.len(), 4);
        // subset sizes grow with the cap
        let sizes: Vec<usize> = rows
            .iter()
            .map(|r| r.metrics.as_ref().map_or(0, |m| m.n))
            .collect();
        for w in sizes.windows(2) {
            assert!(w[0] <= w[1], "{sizes:?}");
        }
        // a 40-student corpus at 30 records each is dense; small caps
        // should be empty or tiny, and empty subsets must not error
        let table = {
            let mut buf = Vec::new();
            write_table(&rows, &mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        assert!(table.starts_with("model\t"));
        if sizes[0] == 0 {
            assert!(table.contains("\tna\t"));
        }
    }

    #[test]
    fn json_output_is_valid() {
        let corpus = gen_corpus(GenMode::Irt, 6);
        let rows = sparsity_sweep(
            &[ModelKind::Dina],
            &corpus,
            &[0.7],
            2,
            &quick_cfg(),
            &DirtConfig::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_json(&rows, &mut buf).unwrap();
        let parsed: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(parsed.as_array().unwrap().len(), 1);
    }
}
