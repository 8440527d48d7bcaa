use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major matrix of finite f64 values. Vectors are `n x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                context: format!("tensor {rows}x{cols}"),
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("tensor {rows}x{cols}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// `U(-1/sqrt(cols), 1/sqrt(cols))`.
    FanIn,
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let mut value = Tensor::zeros(rows, cols);
        if init == Init::FanIn {
            let bound = 1.0 / (cols as f64).sqrt();
            for x in value.data_mut() {
                *x = rng.gen_range(-bound..bound);
            }
        }
        self.insert(name.into(), value)
    }

    pub fn insert(&mut self, name: String, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))?;
        Ok(self.value_mut(id))
    }

    /// Overwrites a parameter by name, checking the length.
    pub fn set(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let t = self.by_name_mut(name)?;
        if t.len() != values.len() {
            return Err(Error::Dimension {
                context: format!("parameter `{name}`"),
                expected: t.len(),
                found: values.len(),
            });
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds a gradient buffer into the stored `grad` tensors.
    pub fn accumulate_grad(&mut self, grads: &Gradients) -> Result<()> {
        grads.check_aligned(self)?;
        for (p, g) in self.params.iter_mut().zip(&grads.data) {
            for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Snapshot of the stored `grad` tensors.
    pub fn grads(&self) -> Gradients {
        Gradients {
            data: self.params.iter().map(|p| p.grad.data().to_vec()).collect(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self
                .params
                .iter()
                .map(|p| CheckpointEntry {
                    name: p.name.clone(),
                    shape: [p.value.rows(), p.value.cols()],
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Loads values from a checkpoint. Names and shapes must match exactly.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.params.len() != self.params.len() {
            return Err(Error::Dimension {
                context: "checkpoint parameter count".into(),
                expected: self.params.len(),
                found: ckpt.params.len(),
            });
        }
        for (p, e) in self.params.iter_mut().zip(&ckpt.params) {
            if p.name != e.name || [p.value.rows(), p.value.cols()] != e.shape {
                return Err(Error::invalid(format!(
                    "checkpoint entry `{}` {:?} does not match parameter `{}` {:?}",
                    e.name,
                    e.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(e.shape[0], e.shape[1], e.values.clone())?;
        }
        Ok(())
    }
}

/// Flat list of `(name, shape, row-major values)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Gradient buffer aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) data: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            data: params.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.data.len() != other.data.len() {
            return Err(Error::Dimension {
                context: "gradient buffers".into(),
                expected: self.data.len(),
                found: other.data.len(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|x| x.is_finite())
    }

    pub(crate) fn check_aligned(&self, params: &ParamSet) -> Result<()> {
        let aligned = self.data.len() == params.params.len()
            && self
                .data
                .iter()
                .zip(&params.params)
                .all(|(g, p)| g.len() == p.value.len());
        if aligned {
            Ok(())
        } else {
            Err(Error::invalid("gradient buffer does not match parameter set"))
        }
    }
}
