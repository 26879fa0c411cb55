//! Model persistence: a plain-text header (format version, model kind,
//! dimensions, config echo, tensor shapes) followed by raw little-endian
//! f64 arrays, so round-trips are bit-exact and the file is inspectable
//! with `head`.

use std::fs;
use std::path::Path;

use crate::classical::{DinaModel, IrtModel, MirtModel};
use crate::data::Corpus;
use crate::deep::{dirt_from_parts, DirtConfig};
use crate::error::{Error, Result};
use crate::eval::AnyModel;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::{ModelKind, TrainConfig, Trainable};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "dirtckpt";

#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub kind: ModelKind,
    pub n_students: usize,
    pub n_questions: usize,
    pub n_concepts: usize,
    /// Present for the deep kinds only.
    pub dirt_config: Option<DirtConfig>,
    pub train_config: TrainConfig,
    /// Train split ratio the checkpoint was fitted with.
    pub ratio: f64,
    pub trained_students: Vec<bool>,
    pub tensors: Vec<(String, Tensor)>,
}

impl ModelCheckpoint {
    pub fn from_model(
        model: &AnyModel,
        corpus: &Corpus,
        train_config: &TrainConfig,
        ratio: f64,
    ) -> Self {
        let (dirt_config, trained_students) = match model {
            AnyModel::Dirt(m) => (Some(m.config.clone()), m.trained_students().to_vec()),
            _ => (None, Vec::new()),
        };
        let tensors = model
            .params()
            .iter()
            .map(|(name, t)| (name.to_string(), (**t).clone()))
            .collect();
        ModelCheckpoint {
            version: FORMAT_VERSION,
            kind: model.kind(),
            n_students: corpus.n_students(),
            n_questions: corpus.n_questions(),
            n_concepts: corpus.n_concepts(),
            dirt_config,
            train_config: train_config.clone(),
            ratio,
            trained_students,
            tensors,
        }
    }

    /// Rebuild the model against a corpus, validating entity counts and
    /// tensor shapes.
    pub fn into_model(self, corpus: &Corpus) -> Result<AnyModel> {
        if corpus.n_students() != self.n_students
            || corpus.n_questions() != self.n_questions
            || corpus.n_concepts() != self.n_concepts
        {
            return Err(Error::Checkpoint(format!(
                "corpus has {}/{}/{} students/questions/concepts but checkpoint was trained on {}/{}/{}",
                corpus.n_students(),
                corpus.n_questions(),
                corpus.n_concepts(),
                self.n_students,
                self.n_questions,
                self.n_concepts,
            )));
        }
        let mut model = match self.kind {
            ModelKind::Dirt | ModelKind::Dirtna => {
                let cfg = self.dirt_config.clone().ok_or_else(|| {
                    Error::Checkpoint("deep checkpoint missing model dimensions".into())
                })?;
                AnyModel::Dirt(dirt_from_parts(
                    corpus,
                    cfg,
                    &flatten(&self.tensors),
                    self.trained_students.clone(),
                )?)
            }
            ModelKind::Irt => AnyModel::Irt(IrtModel::new(corpus)),
            ModelKind::Mirt => AnyModel::Mirt(MirtModel::new(corpus)),
            ModelKind::Dina => AnyModel::Dina(DinaModel::new(corpus)),
        };
        // overwrite tensors by name for the classical kinds (the deep
        // restore above already consumed the flat vector)
        if !matches!(model, AnyModel::Dirt(_)) {
            let params: &mut ParamSet = match &mut model {
                AnyModel::Irt(m) => m.params_mut(),
                AnyModel::Mirt(m) => m.params_mut(),
                AnyModel::Dina(m) => m.params_mut(),
                AnyModel::Dirt(_) => unreachable!(),
            };
            if params.len() != self.tensors.len() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint has {} tensors, model expects {}",
                    self.tensors.len(),
                    params.len()
                )));
            }
            for (name, tensor) in &self.tensors {
                let id = params.id_of(name).ok_or_else(|| {
                    Error::Checkpoint(format!("unexpected tensor {name} in checkpoint"))
                })?;
                if params.get(id).shape() != tensor.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, model expects {:?}",
                        tensor.shape(),
                        params.get(id).shape()
                    )));
                }
                params.set(id, tensor.clone());
            }
        } else if let AnyModel::Dirt(m) = &model {
            // shape sanity for the deep kinds
            for (saved, (name, live)) in self.tensors.iter().zip(m.params().iter()) {
                if saved.0 != name || saved.1.shape() != live.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} does not match the rebuilt model (saved {:?}, expected {} {:?})",
                        saved.0,
                        saved.1.shape(),
                        name,
                        live.shape()
                    )));
                }
            }
        }
        Ok(model)
    }
}

fn flatten(tensors: &[(String, Tensor)]) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, t) in tensors {
        out.extend_from_slice(t.data());
    }
    out
}

pub fn save(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let mut header = String::new();
    header.push_str(&format!("{MAGIC} {}\n", ckpt.version));
    header.push_str(&format!("kind {}\n", ckpt.kind));
    header.push_str(&format!(
        "entities {} {} {}\n",
        ckpt.n_students, ckpt.n_questions, ckpt.n_concepts
    ));
    header.push_str(&format!("ratio {}\n", ckpt.ratio));
    if let Some(cfg) = &ckpt.dirt_config {
        header.push_str(&format!(
            "dims {} {} {} {} {} {}\n",
            cfg.word_dim,
            cfg.concept_dim,
            cfg.max_seq_len,
            cfg.hidden_dim,
            u8::from(cfg.attention),
            u8::from(cfg.uncentered_discrimination),
        ));
    }
    for (k, v) in ckpt.train_config.to_kv() {
        header.push_str(&format!("config {k} {v}\n"));
    }
    if !ckpt.trained_students.is_empty() {
        let bits: String = ckpt
            .trained_students
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect();
        header.push_str(&format!("trained {bits}\n"));
    }
    for (name, t) in &ckpt.tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            "tensor {name} {} {}\n",
            t.shape().len(),
            dims.join(" ")
        ));
    }
    header.push_str("data\n");

    let mut bytes = header.into_bytes();
    for (_, t) in &ckpt.tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path)?;
    let marker = b"\ndata\n";
    let pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Checkpoint(format!("{}: no data section", path.display())))?;
    let header = std::str::from_utf8(&bytes[..pos])
        .map_err(|_| Error::Checkpoint(format!("{}: header is not text", path.display())))?;
    let payload = &bytes[pos + marker.len()..];

    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut lines = header.lines();
    let magic = lines.next().ok_or_else(|| bad("empty header".into()))?;
    let mut parts = magic.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint file".into()));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing format version".into()))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }

    let mut kind = None;
    let mut entities = None;
    let mut ratio = 0.8;
    let mut dirt_config: Option<DirtConfig> = None;
    let mut train_config = TrainConfig::default();
    let mut trained_students = Vec::new();
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();

    for line in lines {
        let mut it = line.splitn(2, ' ');
        let tag = it.next().unwrap_or_default();
        let rest = it.next().unwrap_or_default();
        match tag {
            "kind" => kind = Some(rest.parse::<ModelKind>()?),
            "entities" => {
                let v: Vec<usize> = rest
                    .split_whitespace()
                    .map(|x| x.parse().map_err(|_| bad(format!("bad entity count {x}"))))
                    .collect::<Result<_>>()?;
                if v.len() != 3 {
                    return Err(bad("entities line needs 3 counts".into()));
                }
                entities = Some((v[0], v[1], v[2]));
            }
            "ratio" => {
                ratio = rest
                    .parse()
                    .map_err(|_| bad(format!("bad ratio {rest}")))?;
            }
            "dims" => {
                let v: Vec<usize> = rest
                    .split_whitespace()
                    .map(|x| x.parse().map_err(|_| bad(format!("bad dimension {x}"))))
                    .collect::<Result<_>>()?;
                if v.len() != 6 {
                    return Err(bad("dims line needs 6 values".into()));
                }
                dirt_config = Some(DirtConfig {
                    word_dim: v[0],
                    concept_dim: v[1],
                    max_seq_len: v[2],
                    hidden_dim: v[3],
                    attention: v[4] != 0,
                    uncentered_discrimination: v[5] != 0,
                });
            }
            "config" => {
                let mut kv = rest.splitn(2, ' ');
                let (k, v) = (kv.next().unwrap_or_default(), kv.next().unwrap_or_default());
                train_config.apply_kv(k, v)?;
            }
            "trained" => {
                trained_students = rest.chars().map(|c| c == '1').collect();
            }
            "tensor" => {
                let mut f = rest.split_whitespace();
                let name = f
                    .next()
                    .ok_or_else(|| bad("tensor line missing name".into()))?
                    .to_string();
                let ndim: usize = f
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(format!("tensor {name}: bad rank")))?;
                let dims: Vec<usize> = f
                    .map(|x| x.parse().map_err(|_| bad(format!("tensor {name}: bad extent"))))
                    .collect::<Result<_>>()?;
                if dims.len() != ndim {
                    return Err(bad(format!("tensor {name}: rank/extent mismatch")));
                }
                shapes.push((name, dims));
            }
            "" => {}
            other => return Err(bad(format!("unknown header line {other}"))),
        }
    }

    let kind = kind.ok_or_else(|| bad("missing kind".into()))?;
    let (n_students, n_questions, n_concepts) =
        entities.ok_or_else(|| bad("missing entities".into()))?;

    let total: usize = shapes
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if payload.len() != total * 8 {
        return Err(bad(format!(
            "payload holds {} bytes, header describes {} values",
            payload.len(),
            total
        )));
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for (name, shape) in shapes {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = payload[off..off + numel * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += numel * 8;
        tensors.push((name, Tensor::new(shape, data)?));
    }

    Ok(ModelCheckpoint {
        version,
        kind,
        n_students,
        n_questions,
        n_concepts,
        dirt_config,
        train_config,
        ratio,
        trained_students,
        tensors,
    })
}
