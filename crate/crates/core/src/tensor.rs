//! Dense tensors and named parameter sets.
//!
//! Storage is `f32`; every reduction (dot products, norms, means) accumulates in
//! `f64` in a fixed left-to-right order over insertion order so results are
//! bit-reproducible.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("name", &self.name)
            .field("shape", &self.shape)
            .field("numel", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!(
                "tensor `{name}` has non-positive extent in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor `{name}` shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "tensor `{name}` has a non-finite value at index {pos}"
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { name: name.into(), shape, data: vec![0.0; numel] }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the raw values. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row-major flat copy of the values.
    pub fn flatten(&self) -> Vec<f32> {
        self.data.clone()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &Tensor) -> bool {
        self.name == other.name && self.shape == other.shape
    }

    pub(crate) fn renamed(&self, name: &str) -> Tensor {
        Tensor { name: name.to_string(), shape: self.shape.clone(), data: self.data.clone() }
    }
}

/// What a [`ParamSet`] holds. Congruence ignores the role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Model,
    Backbone,
    Keys,
    PseudoGradient,
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    role: Role,
    entries: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(role: Role) -> Self {
        Self { role, entries: Vec::new() }
    }

    pub fn from_tensors(role: Role, tensors: Vec<Tensor>) -> Result<Self> {
        let mut set = Self::new(role);
        for t in tensors {
            set.push(t)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        if self.get(tensor.name()).is_some() {
            return Err(Error::Input(format!("duplicate tensor name `{}`", tensor.name())));
        }
        self.entries.push(tensor);
        Ok(())
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Tensor> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Tensor> {
        self.entries.iter_mut()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.entries
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|t| t.name.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|t| t.name == name)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(Tensor::is_finite)
    }

    pub fn zeros_like(&self, role: Role) -> ParamSet {
        ParamSet {
            role,
            entries: self
                .entries
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn is_congruent(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a.same_layout(b))
    }

    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter sets have {} and {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if !a.same_layout(b) {
                return Err(Error::ShapeMismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Copies the named entries, in the order given, into a new set.
    pub fn select(&self, names: &[String], role: Role) -> Result<ParamSet> {
        let mut out = ParamSet::new(role);
        for name in names {
            let t = self.get(name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            out.push(t.clone())?;
        }
        Ok(out)
    }

    /// Overwrites entries of `self` with the same-named entries of `part`.
    pub fn overwrite_from(&mut self, part: &ParamSet) -> Result<()> {
        for t in part.iter() {
            let dst = self.get_mut(t.name()).ok_or_else(|| Error::UnknownLayer(t.name.clone()))?;
            if dst.shape != t.shape {
                return Err(Error::ShapeMismatch(format!(
                    "`{}` {:?} vs {:?}",
                    t.name, dst.shape, t.shape
                )));
            }
            dst.data.copy_from_slice(&t.data);
        }
        Ok(())
    }

    /// `self <- a * x + self`
    pub fn axpy_in_place(&mut self, a: f32, x: &ParamSet) -> Result<()> {
        self.check_congruent(x)?;
        for (dst, src) in self.entries.iter_mut().zip(&x.entries) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d += a * *s;
            }
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, a: f32) {
        for t in &mut self.entries {
            for v in &mut t.data {
                *v *= a;
            }
        }
    }

    /// Element-wise `self - other`, tagged as a pseudo-gradient.
    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        self.check_congruent(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| Tensor {
                name: a.name.clone(),
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
            })
            .collect();
        Ok(ParamSet { role: Role::PseudoGradient, entries })
    }

    /// All values concatenated in insertion order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.entries {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// FNV-style hash of names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for t in &self.entries {
            eat(t.name.as_bytes());
            for e in &t.shape {
                eat(&(*e as u64).to_le_bytes());
            }
        }
        for t in &self.entries {
            for v in &t.data {
                h = (h ^ v.to_bits() as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = &'a Tensor;
    type IntoIter = std::slice::Iter<'a, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

/// `a * x + y`, returned as a new set congruent to both inputs.
pub fn axpy(a: f32, x: &ParamSet, y: &ParamSet) -> Result<ParamSet> {
    let mut out = y.clone();
    out.axpy_in_place(a, x)?;
    Ok(out)
}

pub fn flatten(t: &Tensor) -> Vec<f32> {
    t.flatten()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0f64, |acc, (x, y)| acc + (*x as f64) * (*y as f64))
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// l2 norm over the concatenation of every entry.
pub fn l2_norm(p: &ParamSet) -> f64 {
    p.iter()
        .flat_map(|t| t.data.iter())
        .fold(0.0f64, |acc, v| acc + (*v as f64) * (*v as f64))
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the first value in the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub role: Role,
    pub dtype: String,
    pub entries: Vec<ManifestEntry>,
}

impl ParamSet {
    /// JSON manifest plus little-endian `f32` payload.
    pub fn to_parts(&self) -> (Manifest, Vec<u8>) {
        let mut payload = Vec::with_capacity(self.numel() * 4);
        let mut entries = Vec::with_capacity(self.entries.len());
        for t in &self.entries {
            entries.push(ManifestEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset: payload.len(),
            });
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        (Manifest { role: self.role, dtype: "f32le".into(), entries }, payload)
    }

    pub fn from_parts(manifest: &Manifest, payload: &[u8]) -> Result<ParamSet> {
        if manifest.dtype != "f32le" {
            return Err(Error::Serialization(format!("unsupported dtype `{}`", manifest.dtype)));
        }
        let mut set = ParamSet::new(manifest.role);
        for e in &manifest.entries {
            let numel: usize = e.shape.iter().product();
            let end = e.offset + numel * 4;
            let bytes = payload.get(e.offset..end).ok_or_else(|| {
                Error::Serialization(format!("payload too short for `{}`", e.name))
            })?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            set.push(Tensor::new(e.name.clone(), e.shape.clone(), data)?)?;
        }
        Ok(set)
    }

    /// Writes `<stem>.json` (manifest) and `<stem>.bin` (payload).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (manifest, payload) = self.to_parts();
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        std::fs::File::create(stem.with_extension("bin"))?.write_all(&payload)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<ParamSet> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let mut payload = Vec::new();
        std::fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut payload)?;
        ParamSet::from_parts(&manifest, &payload)
    }
}
