//! Flat parameter storage with named tensor views.
//!
//! All model parameters live in one contiguous `Vec<f64>` so the optimizer
//! and checkpoint I/O can treat them uniformly; named views expose them as
//! matrices and vectors to the forward/backward passes.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Name, shape, and placement of one tensor inside the flat buffer.
#[derive(Debug, Clone)]
pub struct TensorDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    defs: Vec<TensorDef>,
    index: BTreeMap<String, usize>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a zero-initialized tensor; returns its id.
    pub fn register(&mut self, name: &str, shape: &[usize]) -> usize {
        debug_assert!(!self.index.contains_key(name), "duplicate tensor {name}");
        let len: usize = shape.iter().product();
        let def = TensorDef {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.data.len(),
            len,
        };
        self.data.resize(self.data.len() + len, 0.0);
        let id = self.defs.len();
        self.index.insert(name.to_string(), id);
        self.defs.push(def);
        id
    }

    pub fn total_len(&self) -> usize {
        self.data.len()
    }

    pub fn defs(&self) -> &[TensorDef] {
        &self.defs
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn slice(&self, id: usize) -> &[f64] {
        let d = &self.defs[id];
        &self.data[d.offset..d.offset + d.len]
    }

    pub fn slice_mut(&mut self, id: usize) -> &mut [f64] {
        let d = &self.defs[id];
        &mut self.data[d.offset..d.offset + d.len]
    }

    pub fn view2(&self, id: usize) -> ArrayView2<'_, f64> {
        let d = &self.defs[id];
        debug_assert_eq!(d.shape.len(), 2, "{} is not a matrix", d.name);
        ArrayView2::from_shape((d.shape[0], d.shape[1]), self.slice(id)).unwrap()
    }

    pub fn view1(&self, id: usize) -> ArrayView1<'_, f64> {
        let d = &self.defs[id];
        debug_assert_eq!(d.shape.len(), 1, "{} is not a vector", d.name);
        ArrayView1::from_shape(d.shape[0], self.slice(id)).unwrap()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// View a gradient buffer (same layout as the parameters) as the tensor
    /// `id`, 2-D.
    pub fn grad_view2<'a>(&self, grads: &'a mut [f64], id: usize) -> ArrayViewMut2<'a, f64> {
        let d = &self.defs[id];
        ArrayViewMut2::from_shape(
            (d.shape[0], d.shape[1]),
            &mut grads[d.offset..d.offset + d.len],
        )
        .unwrap()
    }

    /// View a gradient buffer as the tensor `id`, 1-D.
    pub fn grad_view1<'a>(&self, grads: &'a mut [f64], id: usize) -> ArrayViewMut1<'a, f64> {
        let d = &self.defs[id];
        ArrayViewMut1::from_shape(d.shape[0], &mut grads[d.offset..d.offset + d.len]).unwrap()
    }

    /// Overwrite a tensor by name, checking the shape.
    pub fn set_by_name(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::IncompatibleTensors {
                tensors: vec![format!("{name} (unknown tensor)")],
            })?;
        let def = &self.defs[id];
        if def.shape != shape || values.len() != def.len {
            return Err(Error::IncompatibleTensors {
                tensors: vec![format!(
                    "{name} (expected shape {:?}, got {:?})",
                    def.shape, shape
                )],
            });
        }
        self.slice_mut(id).copy_from_slice(values);
        Ok(())
    }
}
