//! Scene records, vocabularies and knowledge-base triples, with their
//! newline-delimited JSON formats.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    /// `[x, y, w, h]`
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationRecord {
    pub head: usize,
    pub predicate: String,
    pub tail: usize,
}

/// One annotated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub objects: Vec<ObjectRecord>,
    pub relations: Vec<RelationRecord>,
}

impl SceneRecord {
    /// Checks labels, indices, box extents and feature widths.
    pub fn validate(&self, vocab: &Vocabulary, dim: Option<usize>) -> Result<(), String> {
        for (i, o) in self.objects.iter().enumerate() {
            if vocab.object_index(&o.label).is_none() {
                return Err(format!("object {i}: unknown object label {:?}", o.label));
            }
            let [_, _, w, h] = o.bbox;
            if !(w > 0.0 && h > 0.0) || o.bbox.iter().any(|v| !v.is_finite()) {
                return Err(format!(
                    "object {i}: box {:?} needs finite coordinates and positive extents",
                    o.bbox
                ));
            }
            if let (Some(f), Some(d)) = (&o.feature, dim) {
                if f.len() != d {
                    return Err(format!(
                        "object {i}: feature width {} (expected {d})",
                        f.len()
                    ));
                }
            }
            if let Some(f) = &o.feature {
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(format!("object {i}: non-finite feature value"));
                }
            }
        }
        for (r, rel) in self.relations.iter().enumerate() {
            let n = self.objects.len();
            if rel.head >= n || rel.tail >= n {
                return Err(format!(
                    "relation {r}: index ({}, {}) out of range for {n} objects",
                    rel.head, rel.tail
                ));
            }
            if rel.head == rel.tail {
                return Err(format!(
                    "relation {r}: self-relation on object {}",
                    rel.head
                ));
            }
            if vocab.predicate_index(&rel.predicate).is_none() {
                return Err(format!(
                    "relation {r}: unknown predicate {:?}",
                    rel.predicate
                ));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct VocabularyDoc {
    objects: Vec<String>,
    predicates: Vec<String>,
}

/// Ordered class names; position is the class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    objects: Vec<String>,
    predicates: Vec<String>,
    object_lookup: HashMap<String, usize>,
    predicate_lookup: HashMap<String, usize>,
}

fn lookup(names: &[String], kind: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if map.insert(n.clone(), i).is_some() {
            return Err(Error::invalid(format!("duplicate {kind} class {n:?}")));
        }
    }
    Ok(map)
}

impl Vocabulary {
    pub fn new(objects: Vec<String>, predicates: Vec<String>) -> Result<Self> {
        if objects.is_empty() || predicates.is_empty() {
            return Err(Error::invalid(
                "vocabulary needs at least one object and one predicate class",
            ));
        }
        let object_lookup = lookup(&objects, "object")?;
        let predicate_lookup = lookup(&predicates, "predicate")?;
        Ok(Self {
            objects,
            predicates,
            object_lookup,
            predicate_lookup,
        })
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.object_lookup.get(name).copied()
    }

    pub fn predicate_index(&self, name: &str) -> Option<usize> {
        self.predicate_lookup.get(name).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabularyDoc {
            objects: self.objects.clone(),
            predicates: self.predicates.clone(),
        })
        .expect("vocabulary serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: VocabularyDoc =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("vocabulary: {e}")))?;
        Self::new(doc.objects, doc.predicates)
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocabulary::from_json(&text).map_err(|e| Error::Parse {
        path: path.into(),
        line: 1,
        message: e.to_string(),
    })
}

pub fn save_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    fs::write(path, vocab.to_json() + "\n").map_err(|e| Error::io(path, e))
}

fn for_each_line(path: &Path, mut f: impl FnMut(usize, &str) -> Result<(), String>) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        f(i + 1, line).map_err(|message| Error::Parse {
            path: path.into(),
            line: i + 1,
            message,
        })?;
    }
    Ok(())
}

/// Reads newline-delimited scene records, rejecting the first invalid one.
pub fn load_dataset(
    path: &Path,
    vocab: &Vocabulary,
    dim: Option<usize>,
) -> Result<Vec<SceneRecord>> {
    let mut out = Vec::new();
    for_each_line(path, |_, line| {
        let rec: SceneRecord =
            serde_json::from_str(line).map_err(|e| format!("malformed record: {e}"))?;
        rec.validate(vocab, dim)
            .map_err(|e| format!("record {:?}: {e}", rec.id))?;
        out.push(rec);
        Ok(())
    })?;
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("records serialise");
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(path: &Path, records: &[SceneRecord]) -> Result<()> {
    write_lines(path, records)
}

/// Class-level triple from an external knowledge base.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbTriple {
    pub head: String,
    pub predicate: String,
    pub tail: String,
    #[serde(default = "one")]
    pub count: u64,
}

fn one() -> u64 {
    1
}

/// Reads triples; repeated `(head, predicate, tail)` lines merge by summing counts.
pub fn load_kb(path: &Path, vocab: &Vocabulary) -> Result<Vec<KbTriple>> {
    let mut out: Vec<KbTriple> = Vec::new();
    let mut seen: HashMap<(String, String, String), usize> = HashMap::new();
    for_each_line(path, |_, line| {
        let t: KbTriple =
            serde_json::from_str(line).map_err(|e| format!("malformed triple: {e}"))?;
        if vocab.object_index(&t.head).is_none() {
            return Err(format!("unknown object label {:?}", t.head));
        }
        if vocab.object_index(&t.tail).is_none() {
            return Err(format!("unknown object label {:?}", t.tail));
        }
        if vocab.predicate_index(&t.predicate).is_none() {
            return Err(format!("unknown predicate {:?}", t.predicate));
        }
        if t.count == 0 {
            return Err("count must be at least 1".into());
        }
        let key = (t.head.clone(), t.predicate.clone(), t.tail.clone());
        match seen.get(&key) {
            Some(&i) => out[i].count += t.count,
            None => {
                seen.insert(key, out.len());
                out.push(t);
            }
        }
        Ok(())
    })?;
    Ok(out)
}

pub fn save_kb(path: &Path, triples: &[KbTriple]) -> Result<()> {
    write_lines(path, triples)
}

/// Aggregates the relations of `records` into class-level triple counts,
/// ordered by first occurrence.
pub fn kb_from_records(records: &[SceneRecord]) -> Vec<KbTriple> {
    let mut out: Vec<KbTriple> = Vec::new();
    let mut seen: HashMap<(String, String, String), usize> = HashMap::new();
    for rec in records {
        for rel in &rec.relations {
            let key = (
                rec.objects[rel.head].label.clone(),
                rel.predicate.clone(),
                rec.objects[rel.tail].label.clone(),
            );
            match seen.get(&key) {
                Some(&i) => out[i].count += 1,
                None => {
                    seen.insert(key.clone(), out.len());
                    out.push(KbTriple {
                        head: key.0,
                        predicate: key.1,
                        tail: key.2,
                        count: 1,
                    });
                }
            }
        }
    }
    out
}
