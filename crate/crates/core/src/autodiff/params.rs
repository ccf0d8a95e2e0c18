use alloc::string::String;
use alloc::vec::Vec;

use super::Gradients;
use crate::Tensor;

/// Handle to a trainable array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse grouping used by gradient-check reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Embedding,
    VisionProjection,
    Recurrent,
    Attention,
    FeedForward,
    Gate,
    LayerNorm,
    Pooling,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Embedding,
        ParamGroup::VisionProjection,
        ParamGroup::Recurrent,
        ParamGroup::Attention,
        ParamGroup::FeedForward,
        ParamGroup::Gate,
        ParamGroup::LayerNorm,
        ParamGroup::Pooling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embedding => "embeddings",
            ParamGroup::VisionProjection => "vision-projection",
            ParamGroup::Recurrent => "recurrent-cell",
            ParamGroup::Attention => "attention",
            ParamGroup::FeedForward => "feed-forward",
            ParamGroup::Gate => "gates",
            ParamGroup::LayerNorm => "layer-norm",
            ParamGroup::Pooling => "pooling",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

/// Owns every trainable array of a model in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            group,
            value,
            grad: None,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Adds every parameter gradient in `grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if !p.requires_grad {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                None => p.grad = Some(g.clone()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Euclidean norm over every parameter value.
    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .params
            .iter()
            .flat_map(|p| p.value.data())
            .map(|x| x * x)
            .sum();
        crate::math::sqrt(sq)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
