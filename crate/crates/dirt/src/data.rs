//! Domain records, file ingestion, and dataset splitting.
//!
//! File formats (all line-oriented text):
//! - questions: `question_id<TAB>space-separated-token-ids<TAB>comma-separated-concept-ids`
//! - records:   `student_id<TAB>question_id<TAB>score`
//! - embeddings: first line `vocab_size dim`, then `token_id v1 ... v_dim`

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seeding::{rng_for, TAG_SPLIT};

pub const QUESTIONS_FILE: &str = "questions.tsv";
pub const RECORDS_FILE: &str = "records.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.tsv";

/// Token id reserved for padding; it always maps to the zero vector.
pub const PAD_TOKEN: u32 = 0;

#[derive(Debug, Clone)]
pub struct Question {
    pub id: String,
    pub tokens: Vec<u32>,
    /// Distinct concept indices in file order.
    pub concepts: Vec<usize>,
}

/// One student-question interaction with a binary score, stored with
/// resolved indices into the corpus tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponseRecord {
    pub student: usize,
    pub question: usize,
    pub score: u8,
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<u32, Vec<f64>>,
    zero: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
            zero: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, token: u32, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "embedding for token {token} has length {}, table dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.insert(token, vector);
        Ok(())
    }

    /// Unknown tokens (including the padding id) resolve to the zero vector.
    pub fn lookup(&self, token: u32) -> &[f64] {
        self.vectors.get(&token).map_or(&self.zero, |v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u32, &Vec<f64>)> {
        self.vectors.iter()
    }
}

/// Fully cross-referenced dataset: id tables, questions, responses, and
/// the word-embedding table. Immutable after load.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub students: Vec<String>,
    pub questions: Vec<Question>,
    pub concepts: Vec<String>,
    pub records: Vec<ResponseRecord>,
    pub embeddings: EmbeddingTable,
    student_index: HashMap<String, usize>,
    question_index: HashMap<String, usize>,
    concept_index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSummary {
    pub students: usize,
    pub questions: usize,
    pub concepts: usize,
    pub records: usize,
    pub avg_records_per_student: f64,
    pub avg_concepts_per_question: f64,
    pub pct_text_len_le_30: f64,
}

impl Corpus {
    pub fn n_students(&self) -> usize {
        self.students.len()
    }

    pub fn n_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn student_idx(&self, id: &str) -> Result<usize> {
        self.student_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("unknown student {id}")))
    }

    pub fn question_idx(&self, id: &str) -> Result<usize> {
        self.question_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("unknown question {id}")))
    }

    pub fn concept_idx(&self, id: &str) -> Result<usize> {
        self.concept_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("unknown concept {id}")))
    }

    pub fn summary(&self) -> CorpusSummary {
        let le30 = self
            .questions
            .iter()
            .filter(|q| q.tokens.len() <= 30)
            .count();
        CorpusSummary {
            students: self.students.len(),
            questions: self.questions.len(),
            concepts: self.concepts.len(),
            records: self.records.len(),
            avg_records_per_student: self.records.len() as f64 / self.students.len().max(1) as f64,
            avg_concepts_per_question: self
                .questions
                .iter()
                .map(|q| q.concepts.len())
                .sum::<usize>() as f64
                / self.questions.len().max(1) as f64,
            pct_text_len_le_30: 100.0 * le30 as f64 / self.questions.len().max(1) as f64,
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Load and cross-reference the three corpus files.
///
/// Student ids are assigned indices by first appearance in the records
/// file; question and concept indices by first appearance in the
/// questions file.
pub fn load_corpus(
    questions_path: &Path,
    records_path: &Path,
    embeddings_path: &Path,
) -> Result<Corpus> {
    let mut questions = Vec::new();
    let mut question_index = HashMap::new();
    let mut concepts: Vec<String> = Vec::new();
    let mut concept_index = HashMap::new();

    let qtext = fs::read_to_string(questions_path)?;
    for (lineno, line) in qtext.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                questions_path,
                lineno,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let id = fields[0].to_string();
        if question_index.contains_key(&id) {
            return Err(parse_err(
                questions_path,
                lineno,
                format!("duplicate question id {id}"),
            ));
        }
        let tokens: Vec<u32> = fields[1]
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| parse_err(questions_path, lineno, format!("bad token id {t}")))
            })
            .collect::<Result<_>>()?;
        if tokens.is_empty() {
            return Err(parse_err(
                questions_path,
                lineno,
                format!("question {id} has no tokens"),
            ));
        }
        let mut seen = HashSet::new();
        let mut cidx = Vec::new();
        for c in fields[2].split(',') {
            let c = c.trim();
            if c.is_empty() {
                continue;
            }
            let idx = *concept_index.entry(c.to_string()).or_insert_with(|| {
                concepts.push(c.to_string());
                concepts.len() - 1
            });
            if !seen.insert(idx) {
                return Err(parse_err(
                    questions_path,
                    lineno,
                    format!("question {id} repeats concept {c}"),
                ));
            }
            cidx.push(idx);
        }
        if cidx.is_empty() {
            return Err(parse_err(
                questions_path,
                lineno,
                format!("question {id} has no concepts"),
            ));
        }
        question_index.insert(id.clone(), questions.len());
        questions.push(Question {
            id,
            tokens,
            concepts: cidx,
        });
    }
    if questions.is_empty() {
        return Err(parse_err(questions_path, 0, "no questions"));
    }

    let mut students: Vec<String> = Vec::new();
    let mut student_index = HashMap::new();
    let mut records = Vec::new();
    let rtext = fs::read_to_string(records_path)?;
    for (lineno, line) in rtext.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                records_path,
                lineno,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let qid = fields[1];
        let question = *question_index.get(qid).ok_or_else(|| {
            parse_err(
                records_path,
                lineno,
                format!("record references unknown question {qid}"),
            )
        })?;
        let score = match fields[2].trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(parse_err(
                    records_path,
                    lineno,
                    format!("score must be 0 or 1, got {other}"),
                ))
            }
        };
        let sid = fields[0];
        let student = *student_index.entry(sid.to_string()).or_insert_with(|| {
            students.push(sid.to_string());
            students.len() - 1
        });
        records.push(ResponseRecord {
            student,
            question,
            score,
        });
    }

    let embeddings = load_embeddings(embeddings_path)?;

    Ok(Corpus {
        students,
        questions,
        concepts,
        records,
        embeddings,
        student_index,
        question_index,
        concept_index,
    })
}

pub fn load_corpus_dir(dir: &Path) -> Result<Corpus> {
    load_corpus(
        &dir.join(QUESTIONS_FILE),
        &dir.join(RECORDS_FILE),
        &dir.join(EMBEDDINGS_FILE),
    )
}

fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty embeddings file"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(parse_err(path, 1, "header must be `vocab_size dim`"));
    }
    let vocab: usize = parts[0]
        .parse()
        .map_err(|_| parse_err(path, 1, "bad vocab size"))?;
    let dim: usize = parts[1]
        .parse()
        .map_err(|_| parse_err(path, 1, "bad dimension"))?;
    let mut table = EmbeddingTable::new(dim);
    for (lineno, line) in lines {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let token: u32 = it
            .next()
            .unwrap()
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad token id"))?;
        let vector: Vec<f64> = it
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| parse_err(path, lineno, format!("bad float {v}")))
            })
            .collect::<Result<_>>()?;
        if vector.len() != dim {
            return Err(parse_err(
                path,
                lineno,
                format!(
                    "embedding dimension mismatch: header says {dim}, line has {}",
                    vector.len()
                ),
            ));
        }
        table.insert(token, vector)?;
    }
    if table.len() != vocab {
        return Err(parse_err(
            path,
            0,
            format!("header vocab {vocab} but {} vectors", table.len()),
        ));
    }
    Ok(table)
}

/// Write a corpus back out in the canonical file formats.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut qf = fs::File::create(dir.join(QUESTIONS_FILE))?;
    for q in &corpus.questions {
        let tokens: Vec<String> = q.tokens.iter().map(|t| t.to_string()).collect();
        let concepts: Vec<String> = q
            .concepts
            .iter()
            .map(|&c| corpus.concepts[c].clone())
            .collect();
        writeln!(qf, "{}\t{}\t{}", q.id, tokens.join(" "), concepts.join(","))?;
    }
    let mut rf = fs::File::create(dir.join(RECORDS_FILE))?;
    for r in &corpus.records {
        writeln!(
            rf,
            "{}\t{}\t{}",
            corpus.students[r.student], corpus.questions[r.question].id, r.score
        )?;
    }
    let mut ef = fs::File::create(dir.join(EMBEDDINGS_FILE))?;
    writeln!(ef, "{} {}", corpus.embeddings.len(), corpus.embeddings.dim())?;
    let mut tokens: Vec<u32> = corpus.embeddings.iter().map(|(t, _)| *t).collect();
    tokens.sort_unstable();
    for t in tokens {
        let vals: Vec<String> = corpus
            .embeddings
            .lookup(t)
            .iter()
            .map(|v| format!("{v}"))
            .collect();
        writeln!(ef, "{} {}", t, vals.join(" "))?;
    }
    Ok(())
}

/// Truncate or pad a question's token list to exactly `n` slots. Longer
/// texts keep the prefix; shorter ones are padded at the tail with
/// [`PAD_TOKEN`].
pub fn prepare_tokens(question: &Question, n: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(n);
    out.extend(question.tokens.iter().take(n));
    out.resize(n, PAD_TOKEN);
    out
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<ResponseRecord>,
    pub test: Vec<ResponseRecord>,
    pub ratio: f64,
}

/// Per-student stratified shuffle split.
///
/// Each student's records are shuffled once (seeded), the first record of
/// every student is pinned to train, and the rest are ordered by their
/// within-student rank so prefixes stay proportional per student. The
/// train set is the first `round(ratio * total)` records of that fixed
/// inclusion order, which makes splits for the same seed nested across
/// ratios.
pub fn split_records(records: &[ResponseRecord], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if records.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty record list".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidInput(format!(
            "split ratio must be in (0,1), got {ratio}"
        )));
    }
    let mut rng = rng_for(seed, &[TAG_SPLIT]);

    let mut per_student: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        per_student.entry(r.student).or_default().push(i);
    }
    let mut students: Vec<usize> = per_student.keys().copied().collect();
    students.sort_unstable();

    // (pinned, within-student fraction, tiebreak, record index)
    let mut order: Vec<(u8, f64, u64, usize)> = Vec::with_capacity(records.len());
    for &s in &students {
        let recs = per_student.get_mut(&s).unwrap();
        recs.shuffle(&mut rng);
        let n = recs.len();
        for (rank, &idx) in recs.iter().enumerate() {
            let pinned = u8::from(rank != 0);
            let key = rank as f64 / n as f64;
            order.push((pinned, key, rng.gen::<u64>(), idx));
        }
    }
    order.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.partial_cmp(&b.1).unwrap())
            .then(a.2.cmp(&b.2))
    });

    let n_students = students.len();
    let target = ((ratio * records.len() as f64).round() as usize)
        .clamp(n_students, records.len().saturating_sub(1).max(n_students));
    let train: Vec<ResponseRecord> = order[..target].iter().map(|e| records[e.3]).collect();
    let test: Vec<ResponseRecord> = order[target..].iter().map(|e| records[e.3]).collect();
    Ok(DatasetSplit { train, test, ratio })
}

/// Test records whose question appears in train at least once and at most
/// `max_occurrences` times.
pub fn rare_question_subset(split: &DatasetSplit, max_occurrences: usize) -> Vec<ResponseRecord> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for r in &split.train {
        *counts.entry(r.question).or_insert(0) += 1;
    }
    split
        .test
        .iter()
        .filter(|r| {
            counts
                .get(&r.question)
                .is_some_and(|&c| c >= 1 && c <= max_occurrences)
        })
        .copied()
        .collect()
}
