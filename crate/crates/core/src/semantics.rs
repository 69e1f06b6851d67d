//! Sentence descriptions of nodes, their frozen raw embeddings, and the
//! learnable projection that turns them into semantic node features.

use std::collections::HashMap;
use std::path::Path;

use diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::data::PoiMetadata;
use crate::error::{Error, Result};
use crate::init::fan_in_uniform;
use crate::metanodes::CategoryIndex;

const UNKNOWN: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceDescription {
    pub node_index: usize,
    pub text: String,
    /// Template fields that were empty and rendered as "unknown".
    pub missing: Vec<&'static str>,
}

fn field<'a>(value: &'a str, name: &'static str, missing: &mut Vec<&'static str>) -> &'a str {
    let v = value.trim();
    if v.is_empty() {
        missing.push(name);
        UNKNOWN
    } else {
        v
    }
}

pub fn poi_sentence(node_index: usize, m: &PoiMetadata) -> SentenceDescription {
    let mut missing = Vec::new();
    let name = field(&m.name, "name", &mut missing);
    let address = field(&m.address, "address", &mut missing);
    let hours = field(&m.hours, "hours", &mut missing);
    let phone = field(&m.phone, "phone", &mut missing);
    let top = field(&m.top_category, "top_category", &mut missing);
    let sub = field(&m.sub_category, "sub_category", &mut missing);
    let text = format!(
        "This point of interest is {name} located at {address}. \
         It is open for business during {hours}. \
         It can be contacted by phone at {phone}. \
         The location belongs to the top-category {top}, with the sub-category {sub}."
    );
    SentenceDescription {
        node_index,
        text,
        missing,
    }
}

pub fn category_sentence(node_index: usize, city: &str, category: &str) -> SentenceDescription {
    let mut missing = Vec::new();
    let city = field(city, "city", &mut missing);
    let category = field(category, "top_category", &mut missing);
    SentenceDescription {
        node_index,
        text: format!(
            "This is the meta-node representing all the points of interest in {city} \
             that belong to the top category {category}."
        ),
        missing,
    }
}

pub fn global_sentence(node_index: usize, city: &str) -> SentenceDescription {
    let mut missing = Vec::new();
    let city = field(city, "city", &mut missing);
    SentenceDescription {
        node_index,
        text: format!("This is the meta-node representing all the points of interest in {city}."),
        missing,
    }
}

/// Most common city among POI addresses of the form `street, city, …`.
pub fn dominant_city(metadata: &[PoiMetadata]) -> String {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for m in metadata {
        if let Some(city) = m.address.split(',').nth(1).map(str::trim) {
            if !city.is_empty() {
                *counts.entry(city).or_default() += 1;
            }
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(a.0)))
        .map_or_else(String::new, |(c, _)| c.to_string())
}

/// One sentence per node in node order; meta-node sentences only when an
/// index is given.
pub fn render_sentences(
    metadata: &[PoiMetadata],
    index: Option<&CategoryIndex>,
) -> Vec<SentenceDescription> {
    let mut out: Vec<_> = metadata
        .iter()
        .enumerate()
        .map(|(i, m)| poi_sentence(i, m))
        .collect();
    if let Some(index) = index {
        let city = dominant_city(metadata);
        for (k, cat) in index.categories().iter().enumerate() {
            out.push(category_sentence(index.category_node(k), &city, cat));
        }
        out.push(global_sentence(index.global_node(), &city));
    }
    out
}

/// Signed feature hashing of lowercase alphanumeric tokens into `dim`
/// buckets, L2-normalised. Word order is ignored.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    /// Returns the embedding and whether the text had no tokens (zero vector).
    pub fn embed(&self, text: &str) -> (Vec<f64>, bool) {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        let mut any = false;
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            any = true;
            let h = fnv1a(token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        (v, !any || norm == 0.0)
    }

    /// `[nodes, dim]` matrix of sentence embeddings.
    pub fn embed_all(&self, sentences: &[SentenceDescription]) -> Tensor {
        let data = sentences
            .iter()
            .flat_map(|s| self.embed(&s.text).0)
            .collect();
        Tensor::new(&[sentences.len(), self.dim], data).expect("length matches shape")
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Reads `node_key,e_0,…` rows and returns the rows for `keys`, in order.
pub fn load_embeddings_csv(path: &Path, keys: &[String], dim: usize) -> Result<Tensor> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.get(0) != Some("node_key") || headers.len() != dim + 1 {
        return Err(Error::Schema(format!(
            "{}: expected header node_key,e_0..e_{} ({} columns), found {} columns",
            path.display(),
            dim.saturating_sub(1),
            dim + 1,
            headers.len()
        )));
    }
    let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = n as u64 + 2;
        let values = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.into(),
                line,
                msg: e.to_string(),
            })?;
        rows.insert(rec[0].to_string(), values);
    }
    let mut data = Vec::with_capacity(keys.len() * dim);
    for key in keys {
        let row = rows.get(key).ok_or_else(|| {
            Error::Config(format!("{}: no embedding for node {key}", path.display()))
        })?;
        data.extend_from_slice(row);
    }
    Ok(Tensor::new(&[keys.len(), dim], data)?)
}

pub fn write_embeddings_csv(path: &Path, keys: &[String], values: &Tensor) -> Result<()> {
    let cols = values.shape().last().copied().unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["node_key".to_string()];
    header.extend((0..cols).map(|j| format!("e_{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, key) in keys.iter().enumerate() {
        let mut rec = vec![key.clone()];
        rec.extend(values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.into(),
        line: e.position().map_or(0, |p| p.line()),
        msg: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticParams {
    /// `[E, P]`
    pub proj: ParamId,
    /// `[P]`
    pub bias: ParamId,
}

impl SemanticParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        embed_dim: usize,
        semantic_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: store.add(
                "semantics.proj",
                fan_in_uniform(rng, &[embed_dim, semantic_dim], embed_dim),
            )?,
            bias: store.add("semantics.bias", Tensor::zeros(&[semantic_dim]))?,
        })
    }
}

/// `Û = raw · proj + bias`; `raw` is a frozen `[S, E]` input.
pub fn finetune_project<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    p: &SemanticParams,
    raw: &Tensor,
) -> Result<Var<'t>> {
    Ok(tape
        .constant(raw.clone())
        .matmul(tape.param(store, p.proj))?
        .add(tape.param(store, p.bias))?)
}

/// `V = C ∥ Û` with `C: [B, S, M]` and `Û: [S, P]` shared across the batch.
pub fn build_node_features<'t>(tape: &'t Tape, c: Var<'t>, u: Option<Var<'t>>) -> Result<Var<'t>> {
    let Some(u) = u else { return Ok(c) };
    let (cs, us) = (c.shape(), u.shape());
    if cs.len() != 3 || us.len() != 2 || cs[1] != us[0] {
        return Err(Error::Config(format!(
            "node feature rows disagree: temporal {cs:?}, semantic {us:?}"
        )));
    }
    let tiled = tape
        .constant(Tensor::zeros(&[cs[0], us[0], us[1]]))
        .add(u)?;
    Ok(Var::concat(&[c, tiled])?)
}
