//! Named parameter storage with hierarchical names and block-type tags.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Which architectural block a parameter belongs to; decides trainability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockTag {
    TextEncoder,
    SelfAttention,
    CrossAttention,
    Conv,
    TimeEmbedding,
}

/// Parses the block tag out of a hierarchical name such as
/// `unet.down.0.cross_attn.to_q`.
pub fn block_tag(name: &str) -> Option<BlockTag> {
    if name.starts_with("text_encoder.") {
        return Some(BlockTag::TextEncoder);
    }
    name.split('.').find_map(|seg| match seg {
        "self_attn" => Some(BlockTag::SelfAttention),
        "cross_attn" => Some(BlockTag::CrossAttention),
        "conv" | "conv_in" | "conv_out" => Some(BlockTag::Conv),
        "time_embed" => Some(BlockTag::TimeEmbedding),
        _ => None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape of {name}");
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, shape, data });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Replaces values from `(name, shape, data)` triples, e.g. a checkpoint.
    /// Every stored parameter must be provided with a matching shape.
    pub fn load_from<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a [usize], Vec<T>)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, shape, data) in entries {
            let id = self
                .index_of(name)
                .ok_or_else(|| Error::Schema(alloc::format!("unexpected parameter {name}")))?;
            let p = &mut self.params[id.0];
            if p.shape.as_slice() != shape || data.len() != p.data.len() {
                return Err(Error::DimensionMismatch(alloc::format!(
                    "{name}: stored {:?}, loaded {:?}",
                    p.shape,
                    shape
                )));
            }
            p.data = data;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Schema(alloc::format!(
                "missing parameter {}",
                self.params[i].name
            )));
        }
        Ok(())
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub data: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Grads {
            data: store.iter().map(|(_, p)| vec![T::zero(); p.data.len()]).collect(),
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Grads<T>, scale: T) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.data {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .data
            .iter()
            .flat_map(|g| g.iter().map(|v| v.f64() * v.f64()))
            .sum();
        num_traits::Float::sqrt(sq)
    }
}
