//! Parameter traversal shared by the optimizer, the manifest and model I/O.

use crate::conv::BinaryConvLayer;
use crate::tensor::FloatTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable full-precision tensor.
    Float,
    /// Latent weights of a binary convolution.
    Binary,
    /// Non-trainable running statistic.
    Buffer,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }

    pub fn label(self) -> &'static str {
        match self {
            ParamKind::Float => "float",
            ParamKind::Binary => "binary",
            ParamKind::Buffer => "buffer",
        }
    }
}

pub enum SlotRef<'a> {
    Float {
        value: &'a FloatTensor,
        kind: ParamKind,
        decay: bool,
    },
    Binary(&'a BinaryConvLayer),
}

pub enum SlotMut<'a> {
    Float {
        value: &'a mut FloatTensor,
        grad: &'a mut [f32],
        kind: ParamKind,
        decay: bool,
    },
    Binary {
        layer: &'a mut BinaryConvLayer,
        grad: &'a mut [f32],
    },
}

impl SlotRef<'_> {
    pub fn kind(&self) -> ParamKind {
        match self {
            SlotRef::Float { kind, .. } => *kind,
            SlotRef::Binary(_) => ParamKind::Binary,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            SlotRef::Float { value, .. } => value.shape(),
            SlotRef::Binary(layer) => layer.latent().shape(),
        }
    }

    pub fn values(&self) -> &[f32] {
        match self {
            SlotRef::Float { value, .. } => value.data(),
            SlotRef::Binary(layer) => layer.latent().data(),
        }
    }
}

/// Anything that owns named parameter tensors. Traversal order is fixed
/// and identical for both visitors.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, slot| match slot {
            SlotMut::Float { grad, .. } | SlotMut::Binary { grad, .. } => grad.fill(0.0),
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
