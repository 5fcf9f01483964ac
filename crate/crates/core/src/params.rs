//! Named parameter arrays stored in one flat buffer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    specs: Vec<ParamSpec>,
    data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let offset = self.data.len();
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        self.data.extend_from_slice(tensor.data());
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.spec(name).is_some()
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.spec(name).map(|s| &self.data[s.offset..s.offset + s.len()])
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let spec = self
            .spec(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))?;
        Tensor::from_vec(&spec.shape, self.data[spec.offset..spec.offset + spec.len()].to_vec())
    }

    /// Overwrites the values of an existing parameter.
    pub fn set(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let spec = self
            .spec(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))?;
        if spec.shape != tensor.shape() {
            return Err(Error::shape(format!("{:?}", spec.shape), format!("{:?}", tensor.shape())));
        }
        let range = spec.offset..spec.offset + spec.len();
        self.data[range].copy_from_slice(tensor.data());
        Ok(())
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.specs == other.specs
    }

    /// Rebuilds a set from a layout and flat values.
    pub fn from_parts(specs: Vec<ParamSpec>, data: Vec<f64>) -> Result<Self> {
        let total: usize = specs.iter().map(ParamSpec::len).sum();
        if total != data.len() {
            return Err(Error::shape(format!("{total} values"), format!("{} values", data.len())));
        }
        let mut offset = 0;
        for s in &specs {
            if s.offset != offset {
                return Err(Error::InvalidArgument(format!("parameter `{}` has bad offset", s.name)));
            }
            offset += s.len();
        }
        Ok(Self { specs, data })
    }

    /// Copies of the parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for s in &self.specs {
            if s.name.starts_with(prefix) {
                out.push(
                    s.name.clone(),
                    Tensor::from_vec(&s.shape, self.data[s.offset..s.offset + s.len()].to_vec())
                        .expect("spec length"),
                );
            }
        }
        out
    }

    /// Overwrites matching parameters from `other` (by name).
    pub fn assign_from(&mut self, other: &ParamSet) -> Result<()> {
        for s in &other.specs {
            let dst = self
                .specs
                .iter()
                .find(|d| d.name == s.name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{}`", s.name)))?;
            if dst.shape != s.shape {
                return Err(Error::shape(format!("{:?}", dst.shape), format!("{:?}", s.shape)));
            }
            let (a, b) = (dst.offset, s.offset);
            let n = s.len();
            self.data[a..a + n].copy_from_slice(&other.data[b..b + n]);
        }
        Ok(())
    }
}
