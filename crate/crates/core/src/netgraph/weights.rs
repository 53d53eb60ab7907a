//! Named weight archives.
//!
//! An archive is a sequence of entries, each a `u32` little-endian name
//! length, the UTF-8 name, and one `HCT1` float64 record. Entries are written
//! in name order so the same weights always produce the same bytes.
//!
//! Names per layer id: `<id>.w` (K×L×Q×Q) and `<id>.b` (K×1×1) for
//! convolutions, `<id>.scale` and `<id>.shift` (C×1×1) for batch norm, and
//! `fc.w` (128×D×1) plus `fc.b` (128×1×1) for the embedding layer.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::descriptor::{LayerKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{read_header, read_payload, Tensor, WeightTensor};

#[derive(Clone, Debug, PartialEq)]
pub enum WeightEntry {
    Tensor(Tensor<f64>),
    Kernels(WeightTensor<f64>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, WeightEntry>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.entries.insert(name.into(), WeightEntry::Tensor(t));
    }

    pub fn insert_kernels(&mut self, name: impl Into<String>, w: WeightTensor<f64>) {
        self.entries.insert(name.into(), WeightEntry::Kernels(w));
    }

    pub fn get(&self, name: &str) -> Option<&WeightEntry> {
        self.entries.get(name)
    }

    /// Convolution kernels, checked against the expected `(K, L, Q)`.
    pub fn kernels(&self, name: &str, dims: (usize, usize, usize)) -> Result<&WeightTensor<f64>> {
        match self.entries.get(name) {
            Some(WeightEntry::Kernels(w)) if (w.out_channels(), w.in_channels(), w.kernel()) == dims => Ok(w),
            Some(_) => Err(Error::shape(format!("weight {name:?} does not have shape {}x{}x{2}x{2}", dims.0, dims.1, dims.2))),
            None => Err(Error::MissingWeight(name.into())),
        }
    }

    /// A 3D entry of exactly `dims`, returned as its flat data.
    pub fn tensor(&self, name: &str, dims: (usize, usize, usize)) -> Result<&[f64]> {
        match self.entries.get(name) {
            Some(WeightEntry::Tensor(t)) if t.dims() == dims => Ok(t.data()),
            Some(_) => Err(Error::shape(format!("weight {name:?} does not have shape {}x{}x{}", dims.0, dims.1, dims.2))),
            None => Err(Error::MissingWeight(name.into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                WeightEntry::Tensor(t) => out.extend_from_slice(&t.to_bytes()),
                WeightEntry::Kernels(w) => out.extend_from_slice(&w.to_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut store = Self::new();
        while !bytes.is_empty() {
            if bytes.len() < 4 {
                return Err(Error::Truncated { expected: 4, found: bytes.len() });
            }
            let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
            bytes = &bytes[4..];
            if bytes.len() < len {
                return Err(Error::Truncated { expected: len, found: bytes.len() });
            }
            let name = std::str::from_utf8(&bytes[..len])
                .map_err(|_| Error::invalid("weight name is not valid UTF-8"))?
                .to_string();
            bytes = &bytes[len..];
            let header = read_header(&mut bytes)?;
            let data: Vec<f64> = read_payload(&mut bytes, &header)?;
            let d = &header.dims;
            let entry = if d.len() == 4 {
                if d[2] != d[3] {
                    return Err(Error::shape(format!("weight {name:?} has non-square kernels {}x{}", d[2], d[3])));
                }
                WeightEntry::Kernels(WeightTensor::new(d[0], d[1], d[2], data)?)
            } else {
                WeightEntry::Tensor(Tensor::new(d[0], d[1], d[2], data)?)
            };
            if store.entries.insert(name.clone(), entry).is_some() {
                return Err(Error::invalid(format!("duplicate weight name {name:?}")));
            }
        }
        Ok(store)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Seeded random weights for every parameterized layer of `net`.
    ///
    /// Kernels are uniform with variance `2 / fan_in`, biases and batch-norm
    /// shifts small, and batch-norm scales near one, which keeps activations
    /// of order one through deep stacks.
    pub fn random(net: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for layer in net.layers() {
            match &layer.kind {
                LayerKind::Conv { shape, .. } => {
                    let fan_in = (shape.in_channels * shape.kernel * shape.kernel) as f64;
                    let a = (6.0 / fan_in).sqrt();
                    let n = shape.out_channels * shape.in_channels * shape.kernel * shape.kernel;
                    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
                    let w = WeightTensor::new(shape.out_channels, shape.in_channels, shape.kernel, data)
                        .expect("length matches");
                    store.insert_kernels(format!("{}.w", layer.id), w);
                    store.insert_tensor(format!("{}.b", layer.id), vector(&mut rng, shape.out_channels, -0.05, 0.05));
                }
                LayerKind::BatchNorm => {
                    let c = layer.input.0;
                    store.insert_tensor(format!("{}.scale", layer.id), vector(&mut rng, c, 0.8, 1.2));
                    store.insert_tensor(format!("{}.shift", layer.id), vector(&mut rng, c, -0.1, 0.1));
                }
                LayerKind::Pool { .. } | LayerKind::Relu => {}
            }
        }
        let d = net.fc_inputs;
        let a = (3.0 / d as f64).sqrt();
        let data = (0..net.embedding * d).map(|_| rng.gen_range(-a..a)).collect();
        store.insert_tensor("fc.w", Tensor::new(net.embedding, d, 1, data).expect("length matches"));
        store.insert_tensor("fc.b", vector(&mut rng, net.embedding, -0.05, 0.05));
        store
    }
}

/// A seeded input tensor for `net`, uniform in [-1, 1).
pub fn random_input(net: &NetworkSpec, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = net.input_size;
    Tensor::from_fn(net.input_channels, s, s, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn vector(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::new(n, 1, 1, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("length matches")
}
