//! Checkpoint files for models and datasets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPRN"  u32 version  u32 metadata_len  metadata (UTF-8 JSON)  payload
//! ```
//!
//! The metadata names every tensor with its dtype, shape and byte offset into
//! the payload; the payload is the tensors' `f32` values back to back in
//! manifest order. Dataset labels are stored as `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nn::{Arch, ConvBnPathway, Form, Head, ModelBundle, Unit};
use crate::seprep::{FusedConv, SepUnit};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SPRN";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Model,
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

impl TensorEntry {
    fn byte_len(&self) -> usize {
        4 * self.shape.iter().product::<usize>()
    }
}

/// JSON metadata block of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub form: Option<Form>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<Arch>,
    /// Pathways per unit of a seprep model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pathways: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

struct Writer {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer {
            entries: Vec::new(),
            payload: Vec::new(),
        }
    }

    fn put(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.entries.push(TensorEntry {
            name: name.into(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset: self.payload.len(),
        });
        for v in t.data() {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn finish(self, mut meta: Metadata) -> Result<Vec<u8>> {
        meta.tensors = self.entries;
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses the header and metadata and returns them with the payload bytes.
pub fn parse(bytes: &[u8]) -> Result<(Metadata, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = u32_at(bytes, 8) as usize;
    let meta_end = HEADER_LEN + meta_len;
    if bytes.len() < meta_end {
        return Err(Error::TruncatedPayload {
            expected: meta_end,
            found: bytes.len(),
        });
    }
    let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
        .map_err(|e| Error::ManifestMismatch(format!("unreadable metadata: {e}")))?;
    let payload = &bytes[meta_end..];

    let mut expected_offset = 0;
    for e in &meta.tensors {
        if e.dtype != "f32" {
            return Err(Error::ManifestMismatch(format!("tensor {} has dtype {}", e.name, e.dtype)));
        }
        if e.offset != expected_offset || e.shape.contains(&0) {
            return Err(Error::ManifestMismatch(format!(
                "tensor {} at offset {} with shape {:?}, expected offset {expected_offset}",
                e.name, e.offset, e.shape
            )));
        }
        expected_offset += e.byte_len();
    }
    if payload.len() < expected_offset {
        return Err(Error::TruncatedPayload {
            expected: meta_end + expected_offset,
            found: bytes.len(),
        });
    }
    if payload.len() > expected_offset {
        return Err(Error::ManifestMismatch(format!(
            "{} trailing bytes after the declared tensors",
            payload.len() - expected_offset
        )));
    }
    Ok((meta, payload))
}

/// Reads only the metadata of a checkpoint file.
pub fn read_metadata(path: impl AsRef<Path>) -> Result<Metadata> {
    Ok(parse(&fs::read(path)?)?.0)
}

struct Reader<'a> {
    meta: &'a Metadata,
    payload: &'a [u8],
    next: usize,
}

impl Reader<'_> {
    /// The next manifest entry, which must be `name` with `shape`.
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let e = self
            .meta
            .tensors
            .get(self.next)
            .ok_or_else(|| Error::ManifestMismatch(format!("missing tensor {name}")))?;
        if e.name != name || e.shape != shape {
            return Err(Error::ManifestMismatch(format!(
                "expected {name} {shape:?}, found {} {:?}",
                e.name, e.shape
            )));
        }
        self.next += 1;
        let data = self.payload[e.offset..e.offset + e.byte_len()]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data)
    }

    fn done(&self) -> Result<()> {
        match self.meta.tensors.get(self.next) {
            Some(e) => Err(Error::ManifestMismatch(format!("unexpected tensor {}", e.name))),
            None => Ok(()),
        }
    }
}

fn model_meta(model: &ModelBundle<f32>) -> Metadata {
    Metadata {
        kind: Kind::Model,
        form: Some(model.form()),
        arch: Some(model.arch.clone()),
        pathways: Some(model.pathways()),
        heads: Some(model.num_heads()),
        classes: Some(model.arch.classes),
        tensors: Vec::new(),
    }
}

fn put_pathway(w: &mut Writer, prefix: &str, p: &ConvBnPathway<f32>) {
    w.put(format!("{prefix}.kernels"), &p.kernels);
    w.put(format!("{prefix}.run_mu"), &p.run_mu);
    w.put(format!("{prefix}.run_sigma"), &p.run_sigma);
    w.put(format!("{prefix}.gamma"), &p.gamma);
    w.put(format!("{prefix}.beta"), &p.beta);
}

fn take_pathway(r: &mut Reader, prefix: &str, kshape: &[usize], arch: &Arch) -> Result<ConvBnPathway<f32>> {
    let c = [kshape[0]];
    Ok(ConvBnPathway {
        kernels: r.take(&format!("{prefix}.kernels"), kshape)?,
        run_mu: r.take(&format!("{prefix}.run_mu"), &c)?,
        run_sigma: r.take(&format!("{prefix}.run_sigma"), &c)?,
        gamma: r.take(&format!("{prefix}.gamma"), &c)?,
        beta: r.take(&format!("{prefix}.beta"), &c)?,
        stride: arch.stride,
        padding: arch.padding,
    })
}

/// Serializes a model.
pub fn model_to_bytes(model: &ModelBundle<f32>) -> Result<Vec<u8>> {
    model.validate()?;
    let mut w = Writer::new();
    for (i, unit) in model.units.iter().enumerate() {
        match unit {
            Unit::ConvBn(p) => put_pathway(&mut w, &format!("unit{i}"), p),
            Unit::Sep(s) => {
                for (k, p) in s.pathways.iter().enumerate() {
                    put_pathway(&mut w, &format!("unit{i}.path{k}"), p);
                }
                let mw = Tensor::new(&[s.k()], s.merge_weights.clone())?;
                w.put(format!("unit{i}.merge_weights"), &mw);
            }
            Unit::Fused(f) => {
                w.put(format!("unit{i}.kernels"), &f.kernels);
                w.put(format!("unit{i}.bias"), &f.bias);
            }
        }
    }
    for (k, h) in model.heads.iter().enumerate() {
        w.put(format!("head{k}.weight"), &h.weight);
        w.put(format!("head{k}.bias"), &h.bias);
    }
    w.finish(model_meta(model))
}

/// Restores a model serialized by [`model_to_bytes`].
pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelBundle<f32>> {
    let (meta, payload) = parse(bytes)?;
    let missing = |field: &str| Error::ManifestMismatch(format!("model metadata lacks {field}"));
    if meta.kind != Kind::Model {
        return Err(Error::ManifestMismatch("checkpoint holds a dataset, not a model".into()));
    }
    let form = meta.form.ok_or_else(|| missing("form"))?;
    let arch = meta.arch.clone().ok_or_else(|| missing("arch"))?;
    arch.validate().map_err(|e| Error::ManifestMismatch(e.to_string()))?;
    let k = meta.pathways.ok_or_else(|| missing("pathways"))?;
    let heads = meta.heads.ok_or_else(|| missing("heads"))?;
    if k == 0 || heads == 0 || (form != Form::SepRep && k != 1) {
        return Err(Error::ManifestMismatch(format!("{form} model with {k} pathways and {heads} heads")));
    }
    let mut r = Reader {
        meta: &meta,
        payload,
        next: 0,
    };
    let mut units = Vec::with_capacity(arch.widths.len());
    for (i, s) in arch.unit_shapes().into_iter().enumerate() {
        let kshape = [s.out_channels, s.in_channels, arch.kernel, arch.kernel];
        units.push(match form {
            Form::Single => Unit::ConvBn(take_pathway(&mut r, &format!("unit{i}"), &kshape, &arch)?),
            Form::SepRep => {
                let pathways = (0..k)
                    .map(|p| take_pathway(&mut r, &format!("unit{i}.path{p}"), &kshape, &arch))
                    .collect::<Result<Vec<_>>>()?;
                let mw = r.take(&format!("unit{i}.merge_weights"), &[k])?;
                Unit::Sep(SepUnit::with_weights(pathways, mw.into_data())?)
            }
            Form::Fused => Unit::Fused(FusedConv {
                kernels: r.take(&format!("unit{i}.kernels"), &kshape)?,
                bias: r.take(&format!("unit{i}.bias"), &[s.out_channels])?,
                stride: arch.stride,
                padding: arch.padding,
            }),
        });
    }
    let (c, d) = (arch.classes, arch.feature_dim());
    let heads = (0..heads)
        .map(|h| {
            Ok(Head {
                weight: r.take(&format!("head{h}.weight"), &[c, d])?,
                bias: r.take(&format!("head{h}.bias"), &[c])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    r.done()?;
    let model = ModelBundle { arch, units, heads };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &ModelBundle<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle<f32>> {
    model_from_bytes(&fs::read(path)?)
}

pub fn dataset_to_bytes(set: &LabeledSet) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.put("images", &set.images);
    let labels: Vec<f32> = set.labels.iter().map(|&y| y as f32).collect();
    w.put("labels", &Tensor::new(&[labels.len()], labels)?);
    w.finish(Metadata {
        kind: Kind::Dataset,
        form: None,
        arch: None,
        pathways: None,
        heads: None,
        classes: Some(set.classes),
        tensors: Vec::new(),
    })
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<LabeledSet> {
    let (meta, payload) = parse(bytes)?;
    if meta.kind != Kind::Dataset {
        return Err(Error::ManifestMismatch("checkpoint holds a model, not a dataset".into()));
    }
    let classes = meta
        .classes
        .ok_or_else(|| Error::ManifestMismatch("dataset metadata lacks classes".into()))?;
    let image_shape = match meta.tensors.first() {
        Some(e) if e.name == "images" && e.shape.len() == 4 => e.shape.clone(),
        _ => return Err(Error::ManifestMismatch("first tensor must be 4-d images".into())),
    };
    let mut r = Reader {
        meta: &meta,
        payload,
        next: 0,
    };
    let images = r.take("images", &image_shape)?;
    let raw = r.take("labels", &[image_shape[0]])?;
    r.done()?;
    let labels = raw
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
                Ok(v as usize)
            } else {
                Err(Error::ManifestMismatch(format!("label {v} outside [0, {classes})")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledSet::new(images, labels, classes)
}

pub fn save_dataset(set: &LabeledSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_to_bytes(set)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledSet> {
    dataset_from_bytes(&fs::read(path)?)
}
