//! Command-line front end: corpus generation, training, protocol
//! evaluation, and diagnosis export, all reproducible from seeds.
//!
//! Config files are flat `key = value` text; every flag overrides its
//! config key. Exit codes: 0 success, 1 usage error, 2 data error,
//! 3 numeric failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{self, ModelCheckpoint};
use crate::classical::irt_predict;
use crate::data::{load_corpus_dir, split_records, Corpus};
use crate::deep::DirtConfig;
use crate::error::{Error, Result};
use crate::eval::{
    rare_subset_rows, sparsity_sweep, train_any, write_json, write_table, AnyModel, EvalRow,
};
use crate::gen::{generate, GenConfig};
use crate::train::{ModelKind, TrainConfig, Trainable};

#[derive(Parser)]
#[command(
    name = "dirt",
    about = "Cognitive diagnosis with deep item response theory: synthetic corpora, classical baselines, training, and evaluation protocols"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus plus ground truth into a directory.
    Generate {
        /// Flat key = value config file (students, questions, concepts,
        /// vocab, word_dim, mean_records, min_records, mean_concepts,
        /// text_len_p94, rare_questions, seed, mode).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the four corpus files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a model on a corpus and write a checkpoint.
    Train {
        /// dirt | dirtna | irt | mirt | dina
        #[arg(long)]
        model: String,
        /// Directory holding questions.tsv, records.tsv, embeddings.txt.
        #[arg(long)]
        data: PathBuf,
        /// Flat key = value config file (training keys plus ratio and
        /// the model dimensions word_dim, concept_dim, max_seq_len,
        /// hidden_dim, uncentered_discrimination).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path; the epoch log goes to <out>.log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Train share of the record split, in (0,1).
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "batch-size")]
        batch_size: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint under an experiment protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// sweep (retrain across ratios) or rare (rare-question subsets).
        #[arg(long)]
        protocol: String,
        /// Table output path; a JSON copy goes to <out>.json.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated ratios for the sweep protocol.
        #[arg(long)]
        ratios: Option<String>,
        /// Comma-separated occurrence caps for the rare protocol.
        #[arg(long)]
        caps: Option<String>,
    },
    /// Export diagnosed parameters and concept proficiencies.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        student: String,
        /// Comma-separated question ids.
        #[arg(long)]
        questions: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse a flat key-value config file: one `key = value` (or `key value`)
/// pair per line, `#` comments.
pub fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = match line.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => line.split_once(char::is_whitespace).map_or_else(
                || (line, ""),
                |(k, v)| (k.trim(), v.trim()),
            ),
        };
        if key.is_empty() || value.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected `key = value`, got `{raw}`"),
            });
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(config.as_deref(), &out, seed),
        Command::Train {
            model,
            data,
            config,
            out,
            seed,
            ratio,
            epochs,
            batch_size,
            dropout,
            lr,
        } => {
            let overrides = TrainOverrides {
                seed,
                ratio,
                epochs,
                batch_size,
                dropout,
                lr,
            };
            cmd_train(&model, &data, config.as_deref(), &out, &overrides)
        }
        Command::Eval {
            checkpoint,
            data,
            protocol,
            out,
            ratios,
            caps,
        } => cmd_eval(
            &checkpoint,
            &data,
            &protocol,
            &out,
            ratios.as_deref(),
            caps.as_deref(),
        ),
        Command::Diagnose {
            checkpoint,
            data,
            student,
            questions,
            out,
        } => cmd_diagnose(&checkpoint, &data, &student, &questions, &out),
    }
}

/// Generate a corpus; prints one summary line per dataset statistic.
pub fn cmd_generate(config: Option<&Path>, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = GenConfig::default();
    if let Some(path) = config {
        for (k, v) in parse_config_file(path)? {
            cfg.apply_kv(&k, &v)?;
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let summary = generate(&cfg, out_dir)?;
    println!("students\t{}", summary.students);
    println!("questions\t{}", summary.questions);
    println!("concepts\t{}", summary.concepts);
    println!("records\t{}", summary.records);
    println!(
        "avg_records_per_student\t{:.2}",
        summary.avg_records_per_student
    );
    println!(
        "avg_concepts_per_question\t{:.2}",
        summary.avg_concepts_per_question
    );
    println!("pct_text_len_le_30\t{:.1}", summary.pct_text_len_le_30);
    Ok(())
}

pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub ratio: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub dropout: Option<f64>,
    pub lr: Option<f64>,
}

fn load_train_settings(
    corpus: &Corpus,
    config: Option<&Path>,
    overrides: &TrainOverrides,
) -> Result<(TrainConfig, DirtConfig, f64)> {
    let mut cfg = TrainConfig::default();
    let emb_dim = corpus.embeddings.dim();
    let mut dirt_cfg = DirtConfig {
        word_dim: emb_dim,
        concept_dim: emb_dim,
        hidden_dim: emb_dim,
        ..DirtConfig::default()
    };
    let mut ratio = 0.8;
    if let Some(path) = config {
        for (k, v) in parse_config_file(path)? {
            let bad = |k: &str, v: &str| Error::Config(format!("bad value {v} for {k}"));
            match k.as_str() {
                "ratio" => ratio = v.parse().map_err(|_| bad(&k, &v))?,
                "word_dim" => dirt_cfg.word_dim = v.parse().map_err(|_| bad(&k, &v))?,
                "concept_dim" => dirt_cfg.concept_dim = v.parse().map_err(|_| bad(&k, &v))?,
                "max_seq_len" => dirt_cfg.max_seq_len = v.parse().map_err(|_| bad(&k, &v))?,
                "hidden_dim" => dirt_cfg.hidden_dim = v.parse().map_err(|_| bad(&k, &v))?,
                "uncentered_discrimination" => {
                    dirt_cfg.uncentered_discrimination = v.parse().map_err(|_| bad(&k, &v))?
                }
                _ => cfg.apply_kv(&k, &v)?,
            }
        }
    }
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(r) = overrides.ratio {
        ratio = r;
    }
    if let Some(e) = overrides.epochs {
        cfg.max_epochs = e;
    }
    if let Some(b) = overrides.batch_size {
        cfg.batch_size = b;
    }
    if let Some(d) = overrides.dropout {
        cfg.dropout = d;
    }
    if let Some(l) = overrides.lr {
        cfg.learning_rate = l;
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("ratio must be in (0,1), got {ratio}")));
    }
    Ok((cfg, dirt_cfg, ratio))
}

/// Train a model and write the checkpoint plus an epoch log.
pub fn cmd_train(
    model: &str,
    data_dir: &Path,
    config: Option<&Path>,
    out: &Path,
    overrides: &TrainOverrides,
) -> Result<()> {
    let kind: ModelKind = model.parse()?;
    let corpus = load_corpus_dir(data_dir)?;
    let (cfg, dirt_cfg, ratio) = load_train_settings(&corpus, config, overrides)?;

    let split = split_records(&corpus.records, ratio, cfg.seed)?;
    log::info!(
        "training {kind} on {} records ({} held out for test)",
        split.train.len(),
        split.test.len()
    );
    let (model, report) = train_any(kind, &corpus, &split.train, &cfg, &dirt_cfg)?;

    let stdout = std::io::stdout();
    report.write_log(stdout.lock())?;
    let log_path = out.with_extension(format!(
        "{}log",
        out.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    report.write_log(fs::File::create(&log_path)?)?;

    let ckpt = ModelCheckpoint::from_model(&model, &corpus, &cfg, ratio);
    checkpoint::save(&ckpt, out)?;
    println!(
        "checkpoint\t{}\tepochs\t{}\tbest_val_loss\t{:.6}",
        out.display(),
        report.stopped_epoch,
        report
            .epochs
            .get(report.best_epoch.saturating_sub(1))
            .map_or(f64::NAN, |e| e.val_loss)
    );
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} value {v}")))
        })
        .collect()
}

/// Evaluate a checkpoint under the sweep or rare protocol and write the
/// metrics table (TSV plus a JSON copy).
pub fn cmd_eval(
    ckpt_path: &Path,
    data_dir: &Path,
    protocol: &str,
    out: &Path,
    ratios: Option<&str>,
    caps: Option<&str>,
) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let corpus = load_corpus_dir(data_dir)?;

    let rows: Vec<EvalRow> = match protocol {
        "sweep" => {
            let ratios: Vec<f64> = match ratios {
                Some(s) => parse_list(s, "ratio")?,
                None => vec![0.6, 0.7, 0.8, 0.9],
            };
            let dirt_cfg = ckpt.dirt_config.clone().unwrap_or_else(|| {
                let d = corpus.embeddings.dim();
                DirtConfig {
                    word_dim: d,
                    concept_dim: d,
                    hidden_dim: d,
                    ..DirtConfig::default()
                }
            });
            sparsity_sweep(
                &[ckpt.kind],
                &corpus,
                &ratios,
                ckpt.train_config.seed,
                &ckpt.train_config,
                &dirt_cfg,
            )?
        }
        "rare" => {
            let caps: Vec<usize> = match caps {
                Some(s) => parse_list(s, "cap")?,
                None => vec![1, 2, 3, 4],
            };
            let split = split_records(&corpus.records, ckpt.ratio, ckpt.train_config.seed)?;
            let model = ckpt.into_model(&corpus)?;
            rare_subset_rows(&model, &corpus, &split, &caps)?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown protocol {other}; expected sweep|rare"
            )))
        }
    };

    let mut table = Vec::new();
    write_table(&rows, &mut table)?;
    fs::write(out, &table)?;
    print!("{}", String::from_utf8_lossy(&table));
    let json_path = out.with_extension(format!(
        "{}json",
        out.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    write_json(&rows, fs::File::create(&json_path)?)?;
    Ok(())
}

/// Export per-question diagnosed parameters plus the student's full
/// per-concept proficiency vector.
pub fn cmd_diagnose(
    ckpt_path: &Path,
    data_dir: &Path,
    student_id: &str,
    questions: &str,
    out: &Path,
) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let corpus = load_corpus_dir(data_dir)?;
    let model = ckpt.into_model(&corpus)?;
    let student = corpus.student_idx(student_id)?;
    let qids: Vec<String> = questions.split(',').map(|s| s.trim().to_string()).collect();

    let mut f = fs::File::create(out)?;
    writeln!(f, "student\tquestion\ttheta\ta\tb\tp\talpha")?;
    let fmt_alpha =
        |alpha: &[f64]| alpha.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",");

    for qid in &qids {
        let question = corpus.question_idx(qid)?;
        match &model {
            AnyModel::Dirt(m) => {
                let d = m.diagnose(&corpus, student, question)?;
                if !d.student_trained {
                    log::warn!("student {student_id} had no training evidence; proficiencies are at initialization");
                }
                let alpha = m.proficiency(student)?;
                writeln!(
                    f,
                    "{student_id}\t{qid}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                    d.theta,
                    d.a,
                    d.b,
                    d.p,
                    fmt_alpha(&alpha)
                )?;
            }
            AnyModel::Irt(m) => {
                let (theta, a, b) = (
                    m.theta(student),
                    m.discrimination(question),
                    m.difficulty(question),
                );
                let p = irt_predict(theta, a, b);
                // one overall trait: the proficiency export replicates it
                let alpha = vec![theta; corpus.n_concepts()];
                writeln!(
                    f,
                    "{student_id}\t{qid}\t{theta:.6}\t{a:.6}\t{b:.6}\t{p:.6}\t{}",
                    fmt_alpha(&alpha)
                )?;
            }
            AnyModel::Mirt(m) => {
                let traits = m.trait_vector(student);
                let p = m.predict_prob(&corpus, student, question)?;
                // the multidimensional model has no scalar a/b; export the
                // logit as the effective trait
                let logit = (p / (1.0 - p)).ln();
                writeln!(
                    f,
                    "{student_id}\t{qid}\t{logit:.6}\tna\tna\t{p:.6}\t{}",
                    fmt_alpha(&traits)
                )?;
            }
            AnyModel::Dina(_) => {
                return Err(Error::InvalidInput(
                    "diagnosis export needs per-concept proficiencies: dirt and dirtna export \
                     learned values, mirt exports its trait vector, irt exports its scalar trait \
                     replicated per concept; dina checkpoints are not supported"
                        .into(),
                ))
            }
        }
    }
    println!("diagnosis\t{}\tquestions\t{}", out.display(), qids.len());
    Ok(())
}
