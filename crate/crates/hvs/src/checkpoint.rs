//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HVSC" | version u32 | tensor count u32
//! per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | f32 values
//! ```
//!
//! Models, classifiers and supernets are stored as flat lists of tensors with
//! dotted names, e.g. `model.block.0.linear_relu.0.weight`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hvs_core::losses::Classifier;
use hvs_core::nn::{Activation, Block, BlockKind, DenseLayer, EmbeddingModel};
use hvs_core::supernet::{SearchSpace, Supernet};
use hvs_core::train::GalleryModel;
use hvs_core::Tensor2;

use crate::error::{format_err, Result};

pub const MAGIC: &[u8; 4] = b"HVSC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Self {
        NamedTensor { name: name.into(), dims, data }
    }

    pub fn matrix(name: impl Into<String>, t: &Tensor2) -> Self {
        NamedTensor::new(name, vec![t.rows() as u32, t.cols() as u32], t.as_slice().to_vec())
    }

    pub fn vector(name: impl Into<String>, v: &[f32]) -> Self {
        NamedTensor::new(name, vec![v.len() as u32], v.to_vec())
    }

    fn to_matrix(&self) -> Result<Tensor2> {
        match self.dims.as_slice() {
            [r, c] => Ok(Tensor2::new(*r as usize, *c as usize, self.data.clone())?),
            _ => Err(format_err(format!("tensor {} has rank {}, expected 2", self.name, self.dims.len()))),
        }
    }

    fn to_vector(&self) -> Result<Vec<f32>> {
        match self.dims.as_slice() {
            [_] => Ok(self.data.clone()),
            _ => Err(format_err(format!("tensor {} has rank {}, expected 1", self.name, self.dims.len()))),
        }
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| format_err(format!("tensor name {:?} too long", t.name)))?;
        let rank = u8::try_from(t.dims.len()).map_err(|_| format_err("tensor rank above 255"))?;
        let count: usize = t.dims.iter().map(|d| *d as usize).product();
        if count != t.data.len() {
            return Err(format_err(format!("tensor {} has dims {:?} but {} values", t.name, t.dims, t.data.len())));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("truncated file: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub(crate) fn read_header(bytes: &[u8], magic: &[u8; 4], version: u32) -> Result<usize> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(format_err(format!("missing {:?} magic", String::from_utf8_lossy(magic))));
    }
    let v = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if v != version {
        return Err(format_err(format!("unsupported version {v}, expected {version}")));
    }
    Ok(8)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let pos = read_header(bytes, MAGIC, CHECKPOINT_VERSION)?;
    let mut c = Cursor { bytes, pos };
    let count = c.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| format_err("tensor name is not UTF-8"))?.to_string();
        let rank = c.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32()?);
        }
        let n = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d as usize)).ok_or_else(|| format_err("tensor too large"))?;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| format_err("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        out.push(NamedTensor { name, dims, data });
    }
    if c.pos != bytes.len() {
        return Err(format_err(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    decode(&fs::read(path)?)
}

fn layer_tensors(prefix: &str, l: &DenseLayer, out: &mut Vec<NamedTensor>) {
    out.push(NamedTensor::matrix(format!("{prefix}.weight"), l.weight()));
    out.push(NamedTensor::vector(format!("{prefix}.bias"), l.bias()));
}

fn block_tensors(prefix: &str, b: &Block, out: &mut Vec<NamedTensor>) {
    for (j, l) in b.layers().iter().enumerate() {
        layer_tensors(&format!("{prefix}.{}.{j}", b.kind().name()), l, out);
    }
}

pub fn model_tensors(prefix: &str, m: &EmbeddingModel) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (i, b) in m.blocks().iter().enumerate() {
        block_tensors(&format!("{prefix}.block.{i}"), b, &mut out);
    }
    layer_tensors(&format!("{prefix}.head"), m.head(), &mut out);
    out
}

pub fn classifier_tensors(prefix: &str, c: &Classifier) -> Vec<NamedTensor> {
    vec![
        NamedTensor::matrix(format!("{prefix}.prototypes"), c.prototypes()),
        NamedTensor::vector(format!("{prefix}.hyper"), &[c.scale, c.margin, c.temperature, if c.is_frozen() { 1.0 } else { 0.0 }]),
    ]
}

struct Lookup<'a> {
    by_name: BTreeMap<&'a str, &'a NamedTensor>,
}

impl<'a> Lookup<'a> {
    fn new(tensors: &'a [NamedTensor]) -> Self {
        Lookup { by_name: tensors.iter().map(|t| (t.name.as_str(), t)).collect() }
    }

    fn get(&self, name: &str) -> Result<&'a NamedTensor> {
        self.by_name.get(name).copied().ok_or_else(|| format_err(format!("missing tensor {name}")))
    }

    fn layer(&self, prefix: &str, act: Activation) -> Result<DenseLayer> {
        let w = self.get(&format!("{prefix}.weight"))?.to_matrix()?;
        let b = self.get(&format!("{prefix}.bias"))?.to_vector()?;
        Ok(DenseLayer::new(w, b, act)?)
    }

    /// The block stored under `prefix.<kind>.*`, whichever kind it is.
    fn block(&self, prefix: &str) -> Result<Option<Block>> {
        for kind in BlockKind::ALL {
            let p = format!("{prefix}.{}", kind.name());
            if self.by_name.contains_key(format!("{p}.0.weight").as_str()) {
                let mut layers = Vec::new();
                for (j, act) in kind.activations().iter().enumerate() {
                    layers.push(self.layer(&format!("{p}.{j}"), *act)?);
                }
                return Ok(Some(Block::new(kind, layers)?));
            }
        }
        Ok(None)
    }

    fn model(&self, prefix: &str) -> Result<EmbeddingModel> {
        let mut blocks = Vec::new();
        while let Some(b) = self.block(&format!("{prefix}.block.{}", blocks.len()))? {
            blocks.push(b);
        }
        let head = self.layer(&format!("{prefix}.head"), Activation::Identity)?;
        Ok(EmbeddingModel::new(blocks, head)?)
    }

    fn classifier(&self, prefix: &str) -> Result<Classifier> {
        let p = self.get(&format!("{prefix}.prototypes"))?.to_matrix()?;
        let h = self.get(&format!("{prefix}.hyper"))?.to_vector()?;
        let [scale, margin, temperature, frozen] = h[..] else {
            return Err(format_err("classifier hyperparameters need 4 values"));
        };
        let c = Classifier::new(p, scale, margin, temperature)?;
        Ok(if frozen != 0.0 { c.frozen() } else { c })
    }
}

pub fn model_from_tensors(prefix: &str, tensors: &[NamedTensor]) -> Result<EmbeddingModel> {
    Lookup::new(tensors).model(prefix)
}

pub fn classifier_from_tensors(prefix: &str, tensors: &[NamedTensor]) -> Result<Classifier> {
    Lookup::new(tensors).classifier(prefix)
}

/// A model plus its classifier: gallery checkpoints and trained query models.
pub fn save_model(path: &Path, m: &GalleryModel) -> Result<()> {
    let mut t = model_tensors("model", &m.model);
    t.extend(classifier_tensors("classifier", &m.classifier));
    save_tensors(path, &t)
}

pub fn load_model(path: &Path) -> Result<GalleryModel> {
    let t = load_tensors(path)?;
    let l = Lookup::new(&t);
    Ok(GalleryModel { model: l.model("model")?, classifier: l.classifier("classifier")? })
}

/// Loads a gallery checkpoint; its classifier is always marked frozen.
pub fn load_gallery(path: &Path) -> Result<GalleryModel> {
    let mut g = load_model(path)?;
    g.classifier.freeze();
    Ok(g)
}

fn space_tensor(s: &SearchSpace) -> NamedTensor {
    let head = [s.num_layers, s.block_kinds, s.base_width, s.input_dim, s.embedding_dim];
    let mut v: Vec<f32> = head.iter().map(|x| *x as f32).collect();
    v.extend(s.width_choices.iter().map(|m| *m as f32));
    NamedTensor::vector("space", &v)
}

fn space_from(t: &NamedTensor) -> Result<SearchSpace> {
    let v = t.to_vector()?;
    if v.len() < 6 {
        return Err(format_err("search space tensor too short"));
    }
    let n = |i: usize| v[i] as usize;
    // Multipliers are stored as f32; snap back to six decimals.
    let widths = v[5..].iter().map(|m| (*m as f64 * 1e6).round() / 1e6).collect();
    Ok(SearchSpace { num_layers: n(0), block_kinds: n(1), base_width: n(2), input_dim: n(3), embedding_dim: n(4), width_choices: widths })
}

pub fn save_supernet(path: &Path, s: &Supernet) -> Result<()> {
    let mut t = vec![space_tensor(s.space())];
    for (l, row) in s.blocks().iter().enumerate() {
        for b in row {
            block_tensors(&format!("supernet.layer.{l}"), b, &mut t);
        }
    }
    layer_tensors("supernet.head", s.head(), &mut t);
    t.extend(classifier_tensors("classifier", s.classifier()));
    save_tensors(path, &t)
}

pub fn load_supernet(path: &Path) -> Result<Supernet> {
    let t = load_tensors(path)?;
    let l = Lookup::new(&t);
    let space = space_from(l.get("space")?)?;
    let mut layers = Vec::with_capacity(space.num_layers);
    for li in 0..space.num_layers {
        let mut row = Vec::new();
        for kind in BlockKind::ALL.iter().take(space.block_kinds) {
            let p = format!("supernet.layer.{li}.{}", kind.name());
            let mut ls = Vec::new();
            for (j, act) in kind.activations().iter().enumerate() {
                ls.push(l.layer(&format!("{p}.{j}"), *act)?);
            }
            row.push(Block::new(*kind, ls)?);
        }
        layers.push(row);
    }
    let head = l.layer("supernet.head", Activation::Identity)?;
    Ok(Supernet::from_parts(space, layers, head, l.classifier("classifier")?)?)
}
