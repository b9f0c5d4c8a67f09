//! Flat parameter storage addressed by canonical path strings.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// All learnable scalars in one contiguous buffer, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut R) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let offset = self.data.len();
        match init {
            Init::Zeros => self.data.resize(offset + rows * cols, 0.0),
            Init::Ones => self.data.resize(offset + rows * cols, 1.0),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                self.data.extend((0..rows * cols).map(|_| dist.sample(rng)));
            }
        }
        let id = ParamId(self.entries.len() as u32);
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), rows, cols, offset });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i as u32))
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.data.len()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.index()]
    }

    pub fn offset(&self, id: ParamId) -> usize {
        self.entries[id.index()].offset
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.index()];
        &self.data[e.offset..e.offset + e.len()]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &self.entries[id.index()];
        let (o, n) = (e.offset, e.len());
        &mut self.data[o..o + n]
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        let e = &self.entries[id.index()];
        Tensor::from_vec(e.rows, e.cols, self.slice(id).to_vec())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Per-parameter flags for every entry whose name starts with one of
    /// `prefixes`.
    pub fn mask_by_prefix(&self, prefixes: &[&str]) -> Vec<bool> {
        self.entries.iter().map(|e| prefixes.iter().any(|p| e.name.starts_with(p))).collect()
    }

    /// Expands a per-parameter mask to one flag per scalar.
    pub fn scalar_mask(&self, mask: &[bool]) -> Vec<bool> {
        let mut out = vec![false; self.data.len()];
        for (e, &m) in self.entries.iter().zip(mask) {
            if m {
                out[e.offset..e.offset + e.len()].fill(true);
            }
        }
        out
    }

    /// Copies every parameter of `src` whose name matches `from_prefix`
    /// into the entry with the same suffix under `to_prefix`.
    pub fn copy_prefix(&mut self, from_prefix: &str, to_prefix: &str) -> Result<()> {
        let pairs: Vec<(usize, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.name.strip_prefix(from_prefix).map(|s| (i, format!("{to_prefix}{s}"))))
            .map(|(i, target)| {
                self.index.get(&target).map(|&j| (i, j)).ok_or_else(|| Error::Config(format!("no parameter {target}")))
            })
            .collect::<Result<_>>()?;
        for (i, j) in pairs {
            let (src, dst) = (self.entries[i].clone(), self.entries[j].clone());
            if (src.rows, src.cols) != (dst.rows, dst.cols) {
                return Err(Error::Shape(format!("{} vs {}", src.name, dst.name)));
            }
            self.data.copy_within(src.offset..src.offset + src.len(), dst.offset);
        }
        Ok(())
    }

    /// Replaces the values of every parameter present in `other` with the
    /// same name and shape.
    pub fn load_matching(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for e in other.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            let Some(&j) = self.index.get(&e.name) else { continue };
            let dst = self.entries[j].clone();
            if (dst.rows, dst.cols) != (e.rows, e.cols) {
                return Err(Error::Shape(format!("parameter {} has shape {}x{}, expected {}x{}", e.name, e.rows, e.cols, dst.rows, dst.cols)));
            }
            self.data[dst.offset..dst.offset + dst.len()].copy_from_slice(&other.data[e.offset..e.offset + e.len()]);
            n += 1;
        }
        Ok(n)
    }

    /// Rebuilds a store from explicit entries, as read back from a
    /// checkpoint.
    pub fn from_parts(entries: Vec<(String, usize, usize, Vec<f64>)>) -> Result<Self> {
        let mut store = ParamStore::default();
        for (name, rows, cols, values) in entries {
            if values.len() != rows * cols {
                return Err(Error::Shape(format!("parameter {name}: {} values for {rows}x{cols}", values.len())));
            }
            if store.index.contains_key(&name) {
                return Err(Error::Config(format!("duplicate parameter {name}")));
            }
            let offset = store.data.len();
            store.data.extend(values);
            store.index.insert(name.clone(), store.entries.len());
            store.entries.push(ParamEntry { name, rows, cols, offset });
        }
        Ok(store)
    }
}
