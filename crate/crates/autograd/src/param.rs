use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named tensor owned by a model.
///
/// Buffers (normalisation running statistics) travel with parameters in
/// checkpoints but never receive gradients.
#[derive(Clone, Debug)]
pub struct Param<T> {
    name: String,
    value: Tensor<T>,
    buffer: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            buffer: false,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            buffer: true,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn is_buffer(&self) -> bool {
        self.buffer
    }

    /// Replaces the value, keeping the shape fixed.
    pub fn assign(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(TensorError::Shape {
                op: "assign",
                expected: self.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        self.value = value;
        Ok(())
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if !p.is_buffer() {
                n += p.value().numel()
            }
        });
        n
    }

    /// `(name, value)` pairs in visiting order.
    fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push((p.name().to_string(), p.value().clone())));
        out
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.iter().for_each(|m| m.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.iter_mut().for_each(|m| m.visit_mut(f));
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        if let Some(m) = self {
            m.visit(f)
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(m) = self {
            m.visit_mut(f)
        }
    }
}

impl<T: Scalar> Module<T> for Param<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(self)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(self)
    }
}

/// Implements [`Module`] by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_module {
    ($ty:ident < $t:ident > { $($field:ident),* $(,)? }) => {
        impl<$t: $crate::Scalar> $crate::Module<$t> for $ty<$t> {
            fn visit(&self, f: &mut dyn FnMut(&$crate::Param<$t>)) {
                $( $crate::Module::visit(&self.$field, f); )*
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut $crate::Param<$t>)) {
                $( $crate::Module::visit_mut(&mut self.$field, f); )*
            }
        }
    };
}
