//! Binary artifact container.
//!
//! Layout: magic `HSDT`, a `u32` format version, then sections. A section is
//! a 4-byte tag, a `u64` payload length, and the payload. All integers and
//! floats are little endian; floats are stored as `f64` bit patterns so
//! round trips are exact.
//!
//! * `META` JSON describing the artifact kind and architecture.
//! * `TENS` named tensors: count, then per tensor name, rank, extents, data.
//! * `TOPO` tree nodes: id, parent (`u32::MAX` for the root), depth, class
//!   ids, channel indices.
//! * `ISCV` score matrices: layer, classes, presence flags, width, raw and
//!   normalized rows.
//!
//! Datasets store `images` and `labels` tensors in `TENS`, with class
//! labels and split in `META`.
//!
//! Unknown sections are skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{LayerSpec, Model, ParamEntry, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::graph::{Architecture, ChainNet, ChannelSelection, HsdNode, HsdTree};
use crate::sensitivity::{IscvMatrix, IscvSet};
use crate::trainer::{Dataset, Split};

pub const MAGIC: [u8; 4] = *b"HSDT";
pub const VERSION: u32 = 1;
const NO_PARENT: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Chain,
    Tree,
    Iscv,
    Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Chain(ChainNet),
    Tree(HsdTree),
    Iscv(IscvSet),
    Dataset(Dataset),
}

impl Artifact {
    pub fn kind(&self) -> ArtifactKind {
        match self {
            Artifact::Chain(_) => ArtifactKind::Chain,
            Artifact::Tree(_) => ArtifactKind::Tree,
            Artifact::Iscv(_) => ArtifactKind::Iscv,
            Artifact::Dataset(_) => ArtifactKind::Dataset,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    kind: ArtifactKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arch: Option<ArchMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

impl Meta {
    fn bare(kind: ArtifactKind) -> Self {
        Self { kind, arch: None, classes: None, class_labels: None, split: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchMeta {
    layers: Vec<LayerSpec>,
    input_shape: [usize; 3],
    class_labels: Vec<String>,
}

impl ArchMeta {
    fn of(arch: &Architecture) -> Self {
        Self {
            layers: arch.layers().to_vec(),
            input_shape: arch.input_shape(),
            class_labels: arch.class_labels().to_vec(),
        }
    }

    fn build(self) -> Result<Architecture> {
        Architecture::new(self.layers, self.input_shape, self.class_labels)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn section(&mut self, tag: &[u8; 4], payload: Vec<u8>) {
        self.0.extend_from_slice(tag);
        self.u64(payload.len());
        self.0.extend_from_slice(&payload);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Truncated(format!("{} needs {n} bytes at offset {}, {} left", self.what, self.pos, self.buf.len() - self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize32(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit in memory")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn encode_named<'a>(tensors: impl ExactSizeIterator<Item = (String, &'a Tensor)>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(tensors.len());
    for (name, t) in tensors {
        w.u32(name.len());
        w.0.extend_from_slice(name.as_bytes());
        w.u32(t.rank());
        for &d in t.shape() {
            w.u64(d);
        }
        w.f64s(t.data());
    }
    w.0
}

fn encode_tensors(params: &ParamStore) -> Vec<u8> {
    let named: Vec<(String, &Tensor)> = params
        .iter()
        .flat_map(|(name, e)| [(format!("{name}.weight"), &e.weight), (format!("{name}.bias"), &e.bias)])
        .collect();
    encode_named(named.into_iter())
}

fn decode_named(buf: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader::new(buf, "tensor section");
    let count = r.usize32()?;
    let mut named = BTreeMap::new();
    for _ in 0..count {
        let len = r.usize32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let rank = r.usize32()?;
        if !(1..=4).contains(&rank) {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("tensor too large".into()))?;
        let data = r.f64s(n)?;
        named.insert(name, Tensor::new(shape, data)?);
    }
    Ok(named)
}

fn decode_tensors(buf: &[u8]) -> Result<ParamStore> {
    let named = decode_named(buf)?;
    let mut params = ParamStore::new();
    let mut weights = BTreeMap::new();
    let mut biases = BTreeMap::new();
    for (name, t) in named {
        match name.rsplit_once('.') {
            Some((base, "weight")) => weights.insert(base.to_string(), t),
            Some((base, "bias")) => biases.insert(base.to_string(), t),
            _ => return Err(Error::Format(format!("unexpected tensor name {name}"))),
        };
    }
    for (name, weight) in weights {
        let bias = biases.remove(&name).ok_or_else(|| Error::Format(format!("{name} has no bias tensor")))?;
        params.insert(name, ParamEntry { weight, bias });
    }
    if let Some(name) = biases.keys().next() {
        return Err(Error::Format(format!("{name} has a bias but no weight")));
    }
    Ok(params)
}

fn encode_topology(tree: &HsdTree) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(tree.len());
    for n in tree.nodes() {
        w.u32(n.id);
        w.0.extend_from_slice(&n.parent.map_or(NO_PARENT, |p| p as u32).to_le_bytes());
        w.u32(n.layer);
        w.u32(n.classes.len());
        for &c in &n.classes {
            w.u32(c);
        }
        w.u32(n.channels.len());
        for &c in n.channels.indices() {
            w.u32(c);
        }
    }
    w.0
}

fn decode_topology(buf: &[u8]) -> Result<Vec<HsdNode>> {
    let mut r = Reader::new(buf, "topology section");
    let count = r.usize32()?;
    let mut nodes = Vec::with_capacity(count.min(buf.len()));
    for _ in 0..count {
        let id = r.usize32()?;
        let parent = match r.u32()? {
            NO_PARENT => None,
            p => Some(p as usize),
        };
        let layer = r.usize32()?;
        let nc = r.usize32()?;
        let classes = (0..nc).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
        let nch = r.usize32()?;
        let channels = (0..nch).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
        nodes.push(HsdNode {
            id,
            layer,
            parent,
            classes,
            channels: ChannelSelection::new(channels)?,
        });
    }
    Ok(nodes)
}

fn encode_iscv(set: &IscvSet) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(set.len());
    for m in set.values() {
        w.u32(m.layer);
        w.u32(m.num_classes());
        w.0.extend(m.present.iter().map(|&p| p as u8));
        w.u32(m.width());
        w.f64s(m.raw.data());
        w.f64s(m.scores.data());
    }
    w.0
}

fn decode_iscv(buf: &[u8]) -> Result<IscvSet> {
    let mut r = Reader::new(buf, "iscv section");
    let count = r.usize32()?;
    let mut set = IscvSet::new();
    for _ in 0..count {
        let layer = r.usize32()?;
        let classes = r.usize32()?;
        let present = r.take(classes)?.iter().map(|&b| b != 0).collect();
        let k = r.usize32()?;
        let n = classes.checked_mul(k).ok_or_else(|| Error::Format("iscv matrix too large".into()))?;
        let raw = Tensor::new(vec![classes, k], r.f64s(n)?)?;
        let scores = Tensor::new(vec![classes, k], r.f64s(n)?)?;
        set.insert(layer, IscvMatrix { layer, present, scores, raw });
    }
    Ok(set)
}

/// Serializes an artifact to bytes.
pub fn encode(artifact: &Artifact) -> Result<Vec<u8>> {
    let meta = match artifact {
        Artifact::Chain(c) => Meta { arch: Some(ArchMeta::of(c.arch())), ..Meta::bare(ArtifactKind::Chain) },
        Artifact::Tree(t) => Meta {
            arch: Some(ArchMeta::of(t.arch())),
            classes: Some(t.classes().to_vec()),
            ..Meta::bare(ArtifactKind::Tree)
        },
        Artifact::Iscv(_) => Meta::bare(ArtifactKind::Iscv),
        Artifact::Dataset(d) => Meta {
            class_labels: Some(d.class_labels().to_vec()),
            split: Some(d.split()),
            ..Meta::bare(ArtifactKind::Dataset)
        },
    };
    let mut w = Writer(MAGIC.to_vec());
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.section(b"META", serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?);
    match artifact {
        Artifact::Chain(c) => w.section(b"TENS", encode_tensors(c.params())),
        Artifact::Tree(t) => {
            w.section(b"TOPO", encode_topology(t));
            w.section(b"TENS", encode_tensors(t.params()));
        }
        Artifact::Iscv(s) => w.section(b"ISCV", encode_iscv(s)),
        Artifact::Dataset(d) => {
            let labels = Tensor::new(vec![d.len()], d.labels().iter().map(|&l| l as f64).collect())?;
            w.section(b"TENS", encode_named([("images".to_string(), d.images()), ("labels".to_string(), &labels)].into_iter()));
        }
    }
    Ok(w.0)
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Artifact> {
    let mut r = Reader::new(bytes, "header");
    let magic: [u8; 4] = match r.take(4) {
        Ok(m) => m.try_into().expect("4 bytes"),
        Err(_) => {
            let mut m = [0u8; 4];
            m[..bytes.len()].copy_from_slice(bytes);
            return Err(Error::BadMagic(m));
        }
    };
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut sections: BTreeMap<[u8; 4], &[u8]> = BTreeMap::new();
    while !r.finished() {
        r.what = "section header";
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = r.u64()?;
        r.what = "section payload";
        sections.insert(tag, r.take(len)?);
    }
    let section = |tag: &[u8; 4]| {
        sections
            .get(tag)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing {} section", String::from_utf8_lossy(tag))))
    };
    let meta: Meta = serde_json::from_slice(section(b"META")?).map_err(|e| Error::Format(format!("bad metadata: {e}")))?;
    let arch = || -> Result<Architecture> {
        meta.arch
            .clone()
            .ok_or_else(|| Error::Format("metadata has no architecture".into()))?
            .build()
    };
    match meta.kind {
        ArtifactKind::Chain => Ok(Artifact::Chain(ChainNet::from_parts(arch()?, decode_tensors(section(b"TENS")?)?)?)),
        ArtifactKind::Tree => {
            let nodes = decode_topology(section(b"TOPO")?)?;
            let params = decode_tensors(section(b"TENS")?)?;
            let classes = meta.classes.clone().ok_or_else(|| Error::Format("tree metadata has no classes".into()))?;
            Ok(Artifact::Tree(HsdTree::new(arch()?, nodes, classes, params)?))
        }
        ArtifactKind::Iscv => Ok(Artifact::Iscv(decode_iscv(section(b"ISCV")?)?)),
        ArtifactKind::Dataset => {
            let mut named = decode_named(section(b"TENS")?)?;
            let mut take = |name: &str| named.remove(name).ok_or_else(|| Error::Format(format!("dataset has no {name} tensor")));
            let images = take("images")?;
            let labels = take("labels")?
                .data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::Format(format!("label {v} is not a class index")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let class_labels = meta.class_labels.clone().ok_or_else(|| Error::Format("dataset metadata has no class labels".into()))?;
            let split = meta.split.ok_or_else(|| Error::Format("dataset metadata has no split".into()))?;
            Ok(Artifact::Dataset(Dataset::new(images, labels, class_labels, split)?))
        }
    }
}

pub fn save(path: &Path, artifact: &Artifact) -> Result<()> {
    fs::write(path, encode(artifact)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Artifact> {
    decode(&fs::read(path)?)
}

fn wrong_kind(path: &Path, want: ArtifactKind, got: ArtifactKind) -> Error {
    Error::Format(format!("{} holds a {got:?} artifact, expected {want:?}", path.display()))
}

pub fn save_chain(path: &Path, chain: &ChainNet) -> Result<()> {
    save(path, &Artifact::Chain(chain.clone()))
}

pub fn load_chain(path: &Path) -> Result<ChainNet> {
    match load(path)? {
        Artifact::Chain(c) => Ok(c),
        other => Err(wrong_kind(path, ArtifactKind::Chain, other.kind())),
    }
}

pub fn save_tree(path: &Path, tree: &HsdTree) -> Result<()> {
    save(path, &Artifact::Tree(tree.clone()))
}

pub fn load_tree(path: &Path) -> Result<HsdTree> {
    match load(path)? {
        Artifact::Tree(t) => Ok(t),
        other => Err(wrong_kind(path, ArtifactKind::Tree, other.kind())),
    }
}

pub fn save_iscv(path: &Path, set: &IscvSet) -> Result<()> {
    save(path, &Artifact::Iscv(set.clone()))
}

pub fn load_iscv(path: &Path) -> Result<IscvSet> {
    match load(path)? {
        Artifact::Iscv(s) => Ok(s),
        other => Err(wrong_kind(path, ArtifactKind::Iscv, other.kind())),
    }
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    save(path, &Artifact::Dataset(data.clone()))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    match load(path)? {
        Artifact::Dataset(d) => Ok(d),
        other => Err(wrong_kind(path, ArtifactKind::Dataset, other.kind())),
    }
}
