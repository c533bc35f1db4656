//! Named parameter storage, initialization, SGD and checkpoint files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Group holding second-stage classifier parameters; groups `1..` are phases.
pub const SECOND_STAGE_GROUP: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable; updated by [`ParamStore::sgd_step`].
    Weight,
    /// Non-trainable state such as normalization running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub group: u32,
    pub kind: ParamKind,
    velocity: Option<Vec<f64>>,
}

/// Name prefix every parameter of `group` must carry.
pub fn group_prefix(group: u32) -> String {
    if group == SECOND_STAGE_GROUP {
        "rcnn.".to_string()
    } else {
        format!("p{group}.")
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients(pub BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn global_norm(&self) -> f64 {
        self.0.values().map(|t| t.dot(t)).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.0.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: u32, kind: ParamKind, value: Tensor) -> Result<()> {
        let prefix = group_prefix(group);
        if !name.starts_with(&prefix) {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` in group {group} must start with `{prefix}`"
            )));
        }
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name.to_string(), Param { value, group, kind, velocity: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_in_group(&self, group: u32) -> Vec<&str> {
        self.iter().filter(|(_, p)| p.group == group).map(|(n, _)| n).collect()
    }

    pub fn groups(&self) -> Vec<u32> {
        let mut g: Vec<u32> = self.params.values().map(|p| p.group).collect();
        g.sort_unstable();
        g.dedup();
        g
    }

    /// Total number of trainable scalars.
    pub fn weight_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Move every parameter of `other` into this store.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, p) in other.params {
            if self.params.contains_key(&name) {
                return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
            }
            self.params.insert(name, p);
        }
        Ok(())
    }

    /// Split off all parameters of the given group.
    pub fn split_group(&mut self, group: u32) -> ParamStore {
        let names: Vec<String> = self
            .params
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, _)| n.clone())
            .collect();
        let mut out = ParamStore::new();
        for n in names {
            let p = self.params.remove(&n).unwrap();
            out.params.insert(n, p);
        }
        out
    }

    /// Convolution kernel `out×in×k×k` (He-uniform) and zero bias.
    pub fn add_conv(&mut self, name: &str, group: u32, out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) -> Result<()> {
        let fan_in = in_c * k * k;
        let w = he_uniform(&[out_c, in_c, k, k], fan_in, rng);
        self.insert(&format!("{name}.w"), group, ParamKind::Weight, w)?;
        self.insert(&format!("{name}.b"), group, ParamKind::Weight, Tensor::zeros(&[out_c]))
    }

    /// Transposed-convolution kernel `in×out×k×k` for 2× up-sampling and zero bias.
    pub fn add_tconv(&mut self, name: &str, group: u32, in_c: usize, out_c: usize, k: usize, rng: &mut impl Rng) -> Result<()> {
        // Each output receives (k/2)² taps per input channel at stride 2.
        let fan_in = (in_c * k * k / 4).max(1);
        let w = he_uniform(&[in_c, out_c, k, k], fan_in, rng);
        self.insert(&format!("{name}.w"), group, ParamKind::Weight, w)?;
        self.insert(&format!("{name}.b"), group, ParamKind::Weight, Tensor::zeros(&[out_c]))
    }

    /// Normalization scale/shift plus running mean/variance buffers.
    pub fn add_bn(&mut self, name: &str, group: u32, c: usize) -> Result<()> {
        self.insert(&format!("{name}.scale"), group, ParamKind::Weight, Tensor::full(&[c], 1.0))?;
        self.insert(&format!("{name}.shift"), group, ParamKind::Weight, Tensor::zeros(&[c]))?;
        self.insert(&format!("{name}.running_mean"), group, ParamKind::Buffer, Tensor::zeros(&[c]))?;
        self.insert(&format!("{name}.running_var"), group, ParamKind::Buffer, Tensor::full(&[c], 1.0))
    }

    pub fn add_linear(&mut self, name: &str, group: u32, out_f: usize, in_f: usize, rng: &mut impl Rng) -> Result<()> {
        let w = he_uniform(&[out_f, in_f], in_f, rng);
        self.insert(&format!("{name}.w"), group, ParamKind::Weight, w)?;
        self.insert(&format!("{name}.b"), group, ParamKind::Weight, Tensor::zeros(&[out_f]))
    }

    /// One SGD-with-momentum update: `v ← μ·v + g; p ← p − lr·v` for every
    /// trainable parameter. Every trainable parameter must have a gradient.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
        for (name, p) in &self.params {
            if p.kind == ParamKind::Weight {
                match grads.get(name) {
                    None => return Err(Error::MissingGradient(name.clone())),
                    Some(g) if g.shape() != p.value.shape() => {
                        return Err(Error::Shape(format!(
                            "gradient for `{name}` has shape {:?}, parameter has {:?}",
                            g.shape(),
                            p.value.shape()
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        for (name, p) in self.params.iter_mut() {
            if p.kind != ParamKind::Weight {
                continue;
            }
            let g = grads.get(name).unwrap().data();
            let v = p.velocity.get_or_insert_with(|| vec![0.0; g.len()]);
            for ((vi, gi), pi) in v.iter_mut().zip(g).zip(p.value.data_mut()) {
                *vi = momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }

    /// Serialize to the checkpoint byte layout (see `docs/checkpoint.md`).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&p.group.to_le_bytes());
            out.push(match p.kind {
                ParamKind::Weight => 0,
                ParamKind::Buffer => 1,
            });
            out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a parameter checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
            let group = read_u32(&mut r)?;
            let mut kind = [0u8; 1];
            read_exact(&mut r, &mut kind)?;
            let kind = match kind[0] {
                0 => ParamKind::Weight,
                1 => ParamKind::Buffer,
                k => return Err(Error::Checkpoint(format!("unknown record kind {k} for `{name}`"))),
            };
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            if r.len() < numel * 8 {
                return Err(Error::Checkpoint(format!("truncated data for `{name}`")));
            }
            let data = r[..numel * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            r = &r[numel * 8..];
            store
                .insert(&name, group, kind, Tensor::from_parts(shape, data))
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PHDETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
