//! Ground-truth-parameterized corpus generator.
//!
//! Emits the three corpus files plus a ground-truth file, either from a
//! plain logistic model (`irt` mode) or from per-student concept
//! proficiencies (`concept-irt` mode) where both the concept assignments
//! and the question texts carry real signal: each concept owns a disjoint
//! topic vocabulary and question difficulty is the mean difficulty of its
//! concepts.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classical::irt_predict;
use crate::data::{
    load_corpus_dir, CorpusSummary, EMBEDDINGS_FILE, GROUND_TRUTH_FILE, QUESTIONS_FILE,
    RECORDS_FILE,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::seeding::{
    rng_for, TAG_GEN_EMBEDDING, TAG_GEN_QUESTION, TAG_GEN_STRUCTURE, TAG_GEN_STUDENT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenMode {
    Irt,
    ConceptIrt,
}

impl fmt::Display for GenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenMode::Irt => "irt",
            GenMode::ConceptIrt => "concept-irt",
        })
    }
}

impl FromStr for GenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irt" => Ok(GenMode::Irt),
            "concept-irt" => Ok(GenMode::ConceptIrt),
            other => Err(Error::Config(format!(
                "unknown generator mode {other}; expected irt|concept-irt"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_students: usize,
    pub n_questions: usize,
    pub n_concepts: usize,
    pub vocab_size: usize,
    pub word_dim: usize,
    pub mean_records_per_student: f64,
    pub min_records_per_student: usize,
    pub mean_concepts_per_question: f64,
    /// Text lengths are drawn so this length is the 94th percentile.
    pub text_len_p94: usize,
    /// Questions constrained to a handful of records each, for the
    /// rare-question protocol. Rare question i receives 2 + (i mod 4)
    /// records in total.
    pub rare_question_count: usize,
    pub seed: u64,
    pub mode: GenMode,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_students: 100,
            n_questions: 300,
            n_concepts: 20,
            vocab_size: 600,
            word_dim: 50,
            mean_records_per_student: 62.09,
            min_records_per_student: 15,
            mean_concepts_per_question: 1.49,
            text_len_p94: 30,
            rare_question_count: 0,
            seed: 0,
            mode: GenMode::ConceptIrt,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_students == 0
            || self.n_questions == 0
            || self.n_concepts == 0
            || self.vocab_size == 0
            || self.word_dim == 0
        {
            return Err(Error::Config("generator counts must be >= 1".into()));
        }
        if self.vocab_size < 2 * self.n_concepts {
            return Err(Error::Config(format!(
                "vocab size {} too small for {} concept topic blocks",
                self.vocab_size, self.n_concepts
            )));
        }
        if self.mean_concepts_per_question < 1.0 {
            return Err(Error::Config(
                "mean concepts per question must be >= 1".into(),
            ));
        }
        if self.mean_records_per_student < self.min_records_per_student as f64 {
            return Err(Error::Config(
                "mean records per student below the minimum".into(),
            ));
        }
        if self.rare_question_count >= self.n_questions {
            return Err(Error::Config(
                "rare question count must leave at least one common question".into(),
            ));
        }
        if self.text_len_p94 == 0 {
            return Err(Error::Config("text length percentile must be >= 1".into()));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| Error::Config(format!("bad value {v} for {k}"));
        match key {
            "students" => self.n_students = value.parse().map_err(|_| bad(key, value))?,
            "questions" => self.n_questions = value.parse().map_err(|_| bad(key, value))?,
            "concepts" => self.n_concepts = value.parse().map_err(|_| bad(key, value))?,
            "vocab" => self.vocab_size = value.parse().map_err(|_| bad(key, value))?,
            "word_dim" => self.word_dim = value.parse().map_err(|_| bad(key, value))?,
            "mean_records" => {
                self.mean_records_per_student = value.parse().map_err(|_| bad(key, value))?
            }
            "min_records" => {
                self.min_records_per_student = value.parse().map_err(|_| bad(key, value))?
            }
            "mean_concepts" => {
                self.mean_concepts_per_question = value.parse().map_err(|_| bad(key, value))?
            }
            "text_len_p94" => self.text_len_p94 = value.parse().map_err(|_| bad(key, value))?,
            "rare_questions" => {
                self.rare_question_count = value.parse().map_err(|_| bad(key, value))?
            }
            "seed" => self.seed = value.parse().map_err(|_| bad(key, value))?,
            "mode" => self.mode = value.parse()?,
            other => return Err(Error::Config(format!("unknown generator key {other}"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum GroundTruthKind {
    Irt {
        /// Per-student latent trait.
        theta: Vec<f64>,
        /// Per-question discrimination and difficulty.
        disc: Vec<f64>,
        diff: Vec<f64>,
    },
    ConceptIrt {
        /// Per-student proficiency over the ground-truth concept order.
        alpha: Vec<Vec<f64>>,
        concept_difficulty: Vec<f64>,
        /// Concept indices per question, in ground-truth concept order.
        question_concepts: Vec<Vec<usize>>,
    },
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub student_ids: Vec<String>,
    pub question_ids: Vec<String>,
    pub concept_ids: Vec<String>,
    pub kind: GroundTruthKind,
}

impl GroundTruth {
    fn student_idx(&self, id: &str) -> Result<usize> {
        self.student_ids
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown student {id} in ground truth")))
    }

    fn question_idx(&self, id: &str) -> Result<usize> {
        self.question_ids
            .iter()
            .position(|q| q == id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown question {id} in ground truth")))
    }

    /// True (theta, a, b) for a pair, by index.
    pub fn true_params(&self, student: usize, question: usize) -> (f64, f64, f64) {
        match &self.kind {
            GroundTruthKind::Irt { theta, disc, diff } => {
                (theta[student], disc[question], diff[question])
            }
            GroundTruthKind::ConceptIrt {
                alpha,
                concept_difficulty,
                question_concepts,
            } => {
                let concepts = &question_concepts[question];
                let mean_alpha: f64 =
                    concepts.iter().map(|&c| alpha[student][c]).sum::<f64>() / concepts.len() as f64;
                let theta = 6.0 * (mean_alpha - 0.5);
                let b = concepts
                    .iter()
                    .map(|&c| concept_difficulty[c])
                    .sum::<f64>()
                    / concepts.len() as f64;
                (theta, 1.0, b)
            }
        }
    }

    /// The exact generating probability for a pair.
    pub fn oracle_predict_idx(&self, student: usize, question: usize) -> f64 {
        let (theta, a, b) = self.true_params(student, question);
        irt_predict(theta, a, b)
    }
}

/// The exact generating probability for a (student, question) id pair;
/// the Bayes-optimal reference for everything fitted on this corpus.
pub fn oracle_predict(gt: &GroundTruth, student_id: &str, question_id: &str) -> Result<f64> {
    let s = gt.student_idx(student_id)?;
    let q = gt.question_idx(question_id)?;
    Ok(gt.oracle_predict_idx(s, q))
}

/// Failures before the first success; `mean` parameterizes the success
/// probability as 1/(1+mean).
fn geometric(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let p = 1.0 / (1.0 + mean);
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    (u.ln() / (1.0 - p).ln()).floor() as usize
}

fn text_length(rng: &mut ChaCha8Rng, p94: usize) -> usize {
    // 1 + Geom0 with P(len <= p94) = 0.94
    let keep = (0.06f64).powf(1.0 / p94 as f64);
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let extra = (u.ln() / keep.ln()).floor() as usize;
    (1 + extra).min(3 * p94)
}

struct QuestionSpec {
    concepts: Vec<usize>,
    tokens: Vec<u32>,
    disc: f64,
    diff: f64,
}

/// Generate a corpus plus ground truth into `out_dir`, then reload it to
/// confirm the files cross-reference cleanly. Byte-identical for a given
/// config.
pub fn generate(cfg: &GenConfig, out_dir: &Path) -> Result<CorpusSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let p = cfg.n_concepts;

    let mut structure = rng_for(cfg.seed, &[TAG_GEN_STRUCTURE]);

    let concept_ids: Vec<String> = (0..p).map(|c| format!("c{c:03}")).collect();
    let concept_difficulty: Vec<f64> = (0..p).map(|_| structure.gen_range(-2.5..2.5)).collect();

    let student_ids: Vec<String> = (0..cfg.n_students).map(|s| format!("s{s:04}")).collect();
    let question_ids: Vec<String> = (0..cfg.n_questions).map(|q| format!("q{q:05}")).collect();

    // per-student proficiencies or traits
    let alpha: Vec<Vec<f64>> = (0..cfg.n_students)
        .map(|_| (0..p).map(|_| structure.gen::<f64>()).collect())
        .collect();
    let theta: Vec<f64> = (0..cfg.n_students)
        .map(|_| structure.sample::<f64, _>(StandardNormal))
        .collect();

    // questions: concept sets, logistic parameters, topic-worded texts
    let max_extra = p.min(4) - 1;
    let topic_block = ((cfg.vocab_size * 3 / 4) / p).max(1);
    let common_start = (p * topic_block + 1) as u32;
    let questions: Vec<QuestionSpec> = (0..cfg.n_questions)
        .map(|q| {
            let mut rng = rng_for(cfg.seed, &[TAG_GEN_QUESTION, q as u64]);
            let extra = geometric(&mut rng, cfg.mean_concepts_per_question - 1.0).min(max_extra);
            let mut concepts = Vec::with_capacity(1 + extra);
            while concepts.len() < 1 + extra {
                let c = rng.gen_range(0..p);
                if !concepts.contains(&c) {
                    concepts.push(c);
                }
            }
            let disc = rng.gen_range(0.5..2.0);
            let diff = match cfg.mode {
                GenMode::Irt => rng.sample::<f64, _>(StandardNormal).clamp(-3.0, 3.0),
                GenMode::ConceptIrt => {
                    concepts
                        .iter()
                        .map(|&c| concept_difficulty[c])
                        .sum::<f64>()
                        / concepts.len() as f64
                }
            };
            let len = text_length(&mut rng, cfg.text_len_p94);
            let tokens: Vec<u32> = (0..len)
                .map(|_| {
                    if rng.gen::<f64>() < 0.7 {
                        // a word from one of this question's topic blocks
                        let c = concepts[rng.gen_range(0..concepts.len())];
                        (1 + c * topic_block + rng.gen_range(0..topic_block)) as u32
                    } else if common_start <= cfg.vocab_size as u32 {
                        rng.gen_range(common_start..=cfg.vocab_size as u32)
                    } else {
                        rng.gen_range(1..=cfg.vocab_size as u32)
                    }
                })
                .collect();
            QuestionSpec {
                concepts,
                tokens,
                disc,
                diff,
            }
        })
        .collect();

    // rare questions receive a fixed handful of records and are excluded
    // from the normal sampling pool
    let mut pool: Vec<usize> = (0..cfg.n_questions).collect();
    pool.shuffle(&mut structure);
    let rare: Vec<usize> = pool[..cfg.rare_question_count].to_vec();
    let common_pool: Vec<usize> = {
        let rare_set: HashSet<usize> = rare.iter().copied().collect();
        (0..cfg.n_questions)
            .filter(|q| !rare_set.contains(q))
            .collect()
    };
    // rare record assignments: (student, question), gathered per student
    let mut rare_for_student: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_students];
    for (i, &q) in rare.iter().enumerate() {
        let copies = 2 + i % 4;
        let mut chosen = HashSet::new();
        while chosen.len() < copies.min(cfg.n_students) {
            chosen.insert(structure.gen_range(0..cfg.n_students));
        }
        let mut chosen: Vec<usize> = chosen.into_iter().collect();
        chosen.sort_unstable();
        for s in chosen {
            rare_for_student[s].push(q);
        }
    }

    let gt = GroundTruth {
        student_ids: student_ids.clone(),
        question_ids: question_ids.clone(),
        concept_ids: concept_ids.clone(),
        kind: match cfg.mode {
            GenMode::Irt => GroundTruthKind::Irt {
                theta: theta.clone(),
                disc: questions.iter().map(|q| q.disc).collect(),
                diff: questions.iter().map(|q| q.diff).collect(),
            },
            GenMode::ConceptIrt => GroundTruthKind::ConceptIrt {
                alpha: alpha.clone(),
                concept_difficulty: concept_difficulty.clone(),
                question_concepts: questions.iter().map(|q| q.concepts.clone()).collect(),
            },
        },
    };

    // responses, one derived stream per student
    let mean_extra = cfg.mean_records_per_student - cfg.min_records_per_student as f64;
    let per_student: Vec<Vec<(usize, u8)>> = exec::map_indices(cfg.n_students, |s| {
        let mut rng = rng_for(cfg.seed, &[TAG_GEN_STUDENT, s as u64]);
        let want =
            (cfg.min_records_per_student + geometric(&mut rng, mean_extra)).min(common_pool.len());
        let mut seen = HashSet::with_capacity(want);
        let mut records = Vec::with_capacity(want + rare_for_student[s].len());
        while seen.len() < want {
            let q = common_pool[rng.gen_range(0..common_pool.len())];
            if seen.insert(q) {
                records.push(q);
            }
        }
        records.extend(rare_for_student[s].iter().copied());
        records
            .into_iter()
            .map(|q| {
                let p_true = gt.oracle_predict_idx(s, q);
                let score = u8::from(rng.gen::<f64>() < p_true);
                (q, score)
            })
            .collect()
    });

    // embeddings: topic tokens cluster around their concept centroid
    let mut emb_rng = rng_for(cfg.seed, &[TAG_GEN_EMBEDDING]);
    let centroids: Vec<Vec<f64>> = (0..p)
        .map(|_| {
            (0..cfg.word_dim)
                .map(|_| 0.8 * emb_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let embeddings: Vec<Vec<f64>> = (1..=cfg.vocab_size as u32)
        .map(|t| {
            let topic = ((t - 1) as usize) / topic_block;
            (0..cfg.word_dim)
                .map(|d| {
                    let noise: f64 = emb_rng.sample(StandardNormal);
                    if topic < p {
                        centroids[topic][d] + 0.35 * noise
                    } else {
                        0.8 * noise
                    }
                })
                .collect()
        })
        .collect();

    // write the four files
    let mut qf = fs::File::create(out_dir.join(QUESTIONS_FILE))?;
    for (q, spec) in questions.iter().enumerate() {
        let tokens: Vec<String> = spec.tokens.iter().map(|t| t.to_string()).collect();
        let concepts: Vec<String> = spec
            .concepts
            .iter()
            .map(|&c| concept_ids[c].clone())
            .collect();
        writeln!(
            qf,
            "{}\t{}\t{}",
            question_ids[q],
            tokens.join(" "),
            concepts.join(",")
        )?;
    }
    let mut rf = fs::File::create(out_dir.join(RECORDS_FILE))?;
    let mut n_records = 0usize;
    for (s, records) in per_student.iter().enumerate() {
        for &(q, score) in records {
            writeln!(rf, "{}\t{}\t{}", student_ids[s], question_ids[q], score)?;
            n_records += 1;
        }
    }
    let mut ef = fs::File::create(out_dir.join(EMBEDDINGS_FILE))?;
    writeln!(ef, "{} {}", cfg.vocab_size, cfg.word_dim)?;
    for (t, vec) in embeddings.iter().enumerate() {
        let vals: Vec<String> = vec.iter().map(|v| format!("{v}")).collect();
        writeln!(ef, "{} {}", t + 1, vals.join(" "))?;
    }
    save_ground_truth(&gt, &out_dir.join(GROUND_TRUTH_FILE))?;

    let corpus = load_corpus_dir(out_dir)?;
    debug_assert_eq!(corpus.records.len(), n_records);
    Ok(corpus.summary())
}

pub fn save_ground_truth(gt: &GroundTruth, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    match &gt.kind {
        GroundTruthKind::Irt { theta, disc, diff } => {
            writeln!(f, "mode\tmeta\tirt")?;
            for (s, id) in gt.student_ids.iter().enumerate() {
                writeln!(f, "student\t{id}\t{}", theta[s])?;
            }
            for (q, id) in gt.question_ids.iter().enumerate() {
                writeln!(f, "question\t{id}\t{} {}", disc[q], diff[q])?;
            }
        }
        GroundTruthKind::ConceptIrt {
            alpha,
            concept_difficulty,
            question_concepts,
        } => {
            writeln!(f, "mode\tmeta\tconcept-irt")?;
            for (c, id) in gt.concept_ids.iter().enumerate() {
                writeln!(f, "concept\t{id}\t{}", concept_difficulty[c])?;
            }
            for (s, id) in gt.student_ids.iter().enumerate() {
                let vals: Vec<String> = alpha[s].iter().map(|v| format!("{v}")).collect();
                writeln!(f, "student\t{id}\t{}", vals.join(" "))?;
            }
            for (q, id) in gt.question_ids.iter().enumerate() {
                let cs: Vec<String> = question_concepts[q]
                    .iter()
                    .map(|&c| gt.concept_ids[c].clone())
                    .collect();
                writeln!(f, "question\t{id}\t{}", cs.join(","))?;
            }
        }
    }
    Ok(())
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(path)?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut mode: Option<GenMode> = None;
    let mut concept_ids = Vec::new();
    let mut concept_difficulty = Vec::new();
    let mut student_ids = Vec::new();
    let mut student_vals: Vec<Vec<f64>> = Vec::new();
    let mut question_ids = Vec::new();
    let mut question_vals: Vec<String> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(lineno, "expected 3 tab-separated fields".into()));
        }
        match fields[0] {
            "mode" => mode = Some(fields[2].parse()?),
            "concept" => {
                concept_ids.push(fields[1].to_string());
                concept_difficulty.push(
                    fields[2]
                        .parse()
                        .map_err(|_| err(lineno, "bad difficulty".into()))?,
                );
            }
            "student" => {
                student_ids.push(fields[1].to_string());
                let vals: Vec<f64> = fields[2]
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| err(lineno, format!("bad float {v}"))))
                    .collect::<Result<_>>()?;
                student_vals.push(vals);
            }
            "question" => {
                question_ids.push(fields[1].to_string());
                question_vals.push(fields[2].to_string());
            }
            other => return Err(err(lineno, format!("unknown entry kind {other}"))),
        }
    }
    let mode = mode.ok_or_else(|| err(0, "missing mode line".into()))?;
    let kind = match mode {
        GenMode::Irt => {
            let theta = student_vals
                .iter()
                .map(|v| v.first().copied().ok_or_else(|| err(0, "empty theta".into())))
                .collect::<Result<_>>()?;
            let mut disc = Vec::new();
            let mut diff = Vec::new();
            for (i, v) in question_vals.iter().enumerate() {
                let parts: Vec<&str> = v.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(err(0, format!("question {} needs `a b`", question_ids[i])));
                }
                disc.push(parts[0].parse().map_err(|_| err(0, "bad a".into()))?);
                diff.push(parts[1].parse().map_err(|_| err(0, "bad b".into()))?);
            }
            GroundTruthKind::Irt { theta, disc, diff }
        }
        GenMode::ConceptIrt => {
            let question_concepts = question_vals
                .iter()
                .map(|v| {
                    v.split(',')
                        .map(|cid| {
                            concept_ids
                                .iter()
                                .position(|c| c == cid.trim())
                                .ok_or_else(|| err(0, format!("unknown concept {cid}")))
                        })
                        .collect::<Result<Vec<usize>>>()
                })
                .collect::<Result<_>>()?;
            GroundTruthKind::ConceptIrt {
                alpha: student_vals,
                concept_difficulty,
                question_concepts,
            }
        }
    };
    Ok(GroundTruth {
        student_ids,
        question_ids,
        concept_ids,
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_corpus_dir, split_records};
    use crate::metrics::auc_midrank;
    use std::collections::HashMap;

    fn small_cfg() -> GenConfig {
        GenConfig {
            n_students: 40,
            n_questions: 120,
            n_concepts: 8,
            vocab_size: 200,
            word_dim: 10,
            mean_records_per_student: 25.0,
            min_records_per_student: 10,
            seed: 11,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate(&small_cfg(), d1.path()).unwrap();
        generate(&small_cfg(), d2.path()).unwrap();
        for f in [QUESTIONS_FILE, RECORDS_FILE, EMBEDDINGS_FILE, GROUND_TRUTH_FILE] {
            let a = fs::read(d1.path().join(f)).unwrap();
            let b = fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs");
        }
    }

    #[test]
    fn record_volume_tracks_configured_mean() {
        let cfg = GenConfig {
            n_students: 200,
            n_questions: 400,
            mean_records_per_student: 62.0,
            min_records_per_student: 15,
            n_concepts: 20,
            vocab_size: 600,
            word_dim: 8,
            seed: 5,
            ..GenConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let summary = generate(&cfg, dir.path()).unwrap();
        let expected = 200.0 * 62.0;
        let deviation = (summary.records as f64 - expected).abs() / expected;
        assert!(deviation < 0.05, "records {} vs {expected}", summary.records);
    }

    #[test]
    fn text_lengths_hit_percentile_roughly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            n_questions: 1000,
            ..small_cfg()
        };
        let summary = generate(&cfg, dir.path()).unwrap();
        assert!(
            (summary.pct_text_len_le_30 - 94.0).abs() < 3.0,
            "p(len<=30) = {}",
            summary.pct_text_len_le_30
        );
    }

    #[test]
    fn oracle_matches_logistic_formula_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            mode: GenMode::Irt,
            ..small_cfg()
        };
        generate(&cfg, dir.path()).unwrap();
        let gt = load_ground_truth(&dir.path().join(GROUND_TRUTH_FILE)).unwrap();
        let (theta, a, b) = gt.true_params(3, 7);
        assert_eq!(
            oracle_predict(&gt, "s0003", "q00007").unwrap().to_bits(),
            irt_predict(theta, a, b).to_bits()
        );
        assert!(oracle_predict(&gt, "s9999", "q00007").is_err());
    }

    #[test]
    fn ground_truth_roundtrips() {
        for mode in [GenMode::Irt, GenMode::ConceptIrt] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = GenConfig { mode, ..small_cfg() };
            generate(&cfg, dir.path()).unwrap();
            let gt = load_ground_truth(&dir.path().join(GROUND_TRUTH_FILE)).unwrap();
            let copy = dir.path().join("gt2.tsv");
            save_ground_truth(&gt, &copy).unwrap();
            assert_eq!(
                fs::read(dir.path().join(GROUND_TRUTH_FILE)).unwrap(),
                fs::read(&copy).unwrap()
            );
        }
    }

    #[test]
    fn calibration_of_sampled_responses() {
        let cfg = GenConfig {
            n_students: 200,
            n_questions: 300,
            mean_records_per_student: 50.0,
            min_records_per_student: 20,
            n_concepts: 15,
            vocab_size: 400,
            word_dim: 8,
            seed: 3,
            ..GenConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        generate(&cfg, dir.path()).unwrap();
        let corpus = load_corpus_dir(dir.path()).unwrap();
        let gt = load_ground_truth(&dir.path().join(GROUND_TRUTH_FILE)).unwrap();
        assert!(corpus.records.len() >= 9000, "n = {}", corpus.records.len());

        let mut buckets = vec![(0.0f64, 0.0f64, 0usize); 10];
        for r in &corpus.records {
            let p = oracle_predict(
                &gt,
                &corpus.students[r.student],
                &corpus.questions[r.question].id,
            )
            .unwrap();
            let k = ((p * 10.0) as usize).min(9);
            buckets[k].0 += p;
            buckets[k].1 += r.score as f64;
            buckets[k].2 += 1;
        }
        for (sum_p, sum_r, n) in buckets {
            if n >= 200 {
                let gap = (sum_p / n as f64 - sum_r / n as f64).abs();
                assert!(gap < 0.05, "bucket gap {gap} over {n}");
            }
        }
    }

    #[test]
    fn generated_corpus_loads_and_counts_match() {
        let dir = tempfile::tempdir().unwrap();
        let summary = generate(&small_cfg(), dir.path()).unwrap();
        let corpus = load_corpus_dir(dir.path()).unwrap();
        assert_eq!(summary.students, corpus.n_students());
        assert_eq!(summary.records, corpus.records.len());
        assert_eq!(summary.concepts, small_cfg().n_concepts);
    }

    #[test]
    fn rare_questions_receive_few_records() {
        let cfg = GenConfig {
            rare_question_count: 20,
            ..small_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        generate(&cfg, dir.path()).unwrap();
        let corpus = load_corpus_dir(dir.path()).unwrap();
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for r in &corpus.records {
            *counts.entry(r.question).or_insert(0) += 1;
        }
        let few = counts.values().filter(|&&c| (2..=5).contains(&c)).count();
        assert!(few >= 20, "only {few} questions with 2..=5 records");
    }

    /// Concept signal drives predictability: a per-(student, concept)
    /// correct-rate estimator beats the same estimator on shuffled
    /// concept assignments, which in turn behaves like the student-mean
    /// baseline.
    #[test]
    fn shuffled_concepts_destroy_signal() {
        let cfg = GenConfig {
            n_students: 150,
            n_questions: 250,
            n_concepts: 10,
            vocab_size: 300,
            word_dim: 8,
            mean_records_per_student: 60.0,
            min_records_per_student: 30,
            seed: 21,
            ..GenConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        generate(&cfg, dir.path()).unwrap();
        let corpus = load_corpus_dir(dir.path()).unwrap();
        let split = split_records(&corpus.records, 0.8, 9).unwrap();

        let concept_estimator = |concept_of: &dyn Fn(usize) -> Vec<usize>| -> f64 {
            // per-(student, concept) train means, with student-mean fallback
            let mut sums: HashMap<(usize, usize), (f64, f64)> = HashMap::new();
            let mut student_sums: HashMap<usize, (f64, f64)> = HashMap::new();
            for r in &split.train {
                for c in concept_of(r.question) {
                    let e = sums.entry((r.student, c)).or_insert((0.0, 0.0));
                    e.0 += r.score as f64;
                    e.1 += 1.0;
                }
                let e = student_sums.entry(r.student).or_insert((0.0, 0.0));
                e.0 += r.score as f64;
                e.1 += 1.0;
            }
            let preds: Vec<f64> = split
                .test
                .iter()
                .map(|r| {
                    let cs = concept_of(r.question);
                    let vals: Vec<f64> = cs
                        .iter()
                        .filter_map(|c| sums.get(&(r.student, *c)))
                        .map(|(s, n)| s / n)
                        .collect();
                    if vals.is_empty() {
                        student_sums
                            .get(&r.student)
                            .map_or(0.5, |(s, n)| s / n)
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    }
                })
                .collect();
            let labels: Vec<u8> = split.test.iter().map(|r| r.score).collect();
            auc_midrank(&preds, &labels).unwrap()
        };

        let true_auc = concept_estimator(&|q| corpus.questions[q].concepts.clone());
        // shuffle the question -> concepts map
        let mut qidx: Vec<usize> = (0..corpus.n_questions()).collect();
        qidx.rotate_left(corpus.n_questions() / 3);
        let shuffled_auc = concept_estimator(&|q| corpus.questions[qidx[q]].concepts.clone());

        // student-mean baseline
        let mut student_sums: HashMap<usize, (f64, f64)> = HashMap::new();
        for r in &split.train {
            let e = student_sums.entry(r.student).or_insert((0.0, 0.0));
            e.0 += r.score as f64;
            e.1 += 1.0;
        }
        let base_preds: Vec<f64> = split
            .test
            .iter()
            .map(|r| student_sums.get(&r.student).map_or(0.5, |(s, n)| s / n))
            .collect();
        let base_labels: Vec<u8> = split.test.iter().map(|r| r.score).collect();
        let base_auc = auc_midrank(&base_preds, &base_labels).unwrap();

        assert!(
            true_auc > shuffled_auc + 0.05,
            "true {true_auc} vs shuffled {shuffled_auc}"
        );
        assert!(
            (shuffled_auc - base_auc).abs() < 0.05,
            "shuffled {shuffled_auc} vs baseline {base_auc}"
        );
    }
}
