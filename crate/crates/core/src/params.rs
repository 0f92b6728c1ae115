//! Named parameter storage shared by the backbone and every fine-tuning
//! attachment.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    NormGain,
    NormBias,
    Positional,
    Prompt,
}

impl ParamRole {
    /// One-dimensional additive offsets (linear and normalization biases).
    pub fn is_bias(self) -> bool {
        matches!(self, ParamRole::Bias | ParamRole::NormBias)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Backbone,
    Strategy,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
    pub owner: Owner,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, role: ParamRole, owner: Owner) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            role,
            owner,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn numel_where(&self, pred: impl Fn(&Param) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p)).map(|p| p.value.numel()).sum()
    }

    /// Mutable values of the parameters selected by `mask`, in id order.
    pub fn masked_values_mut(&mut self, mask: &[bool]) -> Vec<&mut Tensor> {
        self.params
            .iter_mut()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| &mut p.value)
            .collect()
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    /// Places every parameter on the tape as a leaf. Leaves require a
    /// gradient only where `trainable` is set.
    pub fn bind(&self, tape: &mut Tape, trainable: Option<&[bool]>) -> Bound {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let rg = trainable.map(|m| m[i]).unwrap_or(false);
                tape.leaf(p.value.clone(), rg)
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
