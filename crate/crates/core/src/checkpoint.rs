//! Binary model checkpoints.
//!
//! Layout (little-endian): `b"SCHM"`, `u32` version, `u64` metadata length,
//! UTF-8 JSON metadata, then every parameter tensor as raw `f32` values in
//! the order the metadata lists them.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::model::{Model, ModelConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SCHM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub model: ModelConfig,
    pub objects: Vec<String>,
    pub predicates: Vec<String>,
    pub vocab_digest: String,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: Vocabulary,
    pub step: u64,
}

pub fn to_bytes(model: &Model<f32>, vocab: &Vocabulary, step: u64) -> Result<Vec<u8>> {
    if vocab.objects().len() != model.n_object_classes
        || vocab.predicates().len() != model.n_predicate_classes
    {
        return Err(Error::Checkpoint(
            "vocabulary size differs from the model's class counts".into(),
        ));
    }
    let meta = Metadata {
        model: model.config.clone(),
        objects: vocab.objects().to_vec(),
        predicates: vocab.predicates().to_vec(),
        vocab_digest: vocab.digest(),
        step,
        tensors: model
            .params
            .names()
            .iter()
            .zip(model.params.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.params.total_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<Checkpoint> {
    let b = &mut bytes;
    if take(b, 4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(b, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let len = u64::from_le_bytes(take(b, 8, "metadata length")?.try_into().expect("8 bytes"));
    let len =
        usize::try_from(len).map_err(|_| Error::Checkpoint("metadata length overflows".into()))?;
    let meta: Metadata = serde_json::from_slice(take(b, len, "metadata")?)
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let vocab = Vocabulary::new(meta.objects.clone(), meta.predicates.clone())
        .map_err(|e| Error::Checkpoint(format!("embedded vocabulary: {e}")))?;
    if vocab.digest() != meta.vocab_digest {
        return Err(Error::Checkpoint(
            "embedded vocabulary does not match its digest".into(),
        ));
    }
    let mut model = Model::<f32>::new(
        meta.model.clone(),
        vocab.objects().len(),
        vocab.predicates().len(),
        0,
    )
    .map_err(|e| Error::Checkpoint(format!("model configuration: {e}")))?;
    if model.params.len() != meta.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors listed, configuration implies {}",
            meta.tensors.len(),
            model.params.len()
        )));
    }
    let names = model.params.names().to_vec();
    for ((entry, name), tensor) in meta
        .tensors
        .iter()
        .zip(&names)
        .zip(model.params.tensors_mut())
    {
        if &entry.name != name || entry.shape != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} {:?} does not fit slot {name:?} {:?}",
                entry.name,
                entry.shape,
                tensor.shape()
            )));
        }
        let raw = take(b, 4 * tensor.len(), &entry.name)?;
        for (dst, chunk) in tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        if !tensor.all_finite() {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} holds non-finite values"
            )));
        }
    }
    if !b.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", b.len())));
    }
    Ok(Checkpoint {
        model,
        vocab,
        step: meta.step,
    })
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    vocab: &Vocabulary,
    step: u64,
) -> Result<()> {
    let bytes = to_bytes(model, vocab, step)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint and requires its vocabulary to equal `vocab`.
pub fn load_checkpoint_for(path: &Path, vocab: &Vocabulary) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.vocab.digest() != vocab.digest() {
        return Err(Error::Checkpoint(format!(
            "{}: vocabulary digest mismatch (checkpoint {}, given {})",
            path.display(),
            ckpt.vocab.digest(),
            vocab.digest()
        )));
    }
    Ok(ckpt)
}
