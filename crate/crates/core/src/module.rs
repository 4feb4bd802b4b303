//! Named parameter traversal shared by every model component.

use crate::autodiff::Gradients;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Joins a dotted parameter path.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A bundle of named parameter tensors visited in a fixed order.
pub trait Module<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    /// [`visit_mut`](Self::visit_mut) in the same order, without building names.
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        self.visit_mut("", &mut |_, t| f(t));
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n.to_string(), t)));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }

    /// Adds tape gradients into each parameter's grad slot.
    fn accumulate_grads(&mut self, grads: &Gradients<T>) {
        self.visit_mut("", &mut |_, t| {
            if let Some(g) = grads.for_param(t) {
                let g = g.to_vec();
                t.accumulate_grad(&g);
            }
        });
    }
}

impl<T: Scalar> Module<T> for Tensor<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f(prefix, self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(prefix, self);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        f(self);
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        for m in self {
            m.for_each_param_mut(f);
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        if let Some(m) = self {
            m.for_each_param_mut(f);
        }
    }
}

/// Implements [`Module`] for a struct by listing its parameter fields.
#[macro_export]
macro_rules! impl_module {
    ($ty:ident { $($field:ident => $name:literal),* $(,)? }) => {
        impl<T: $crate::scalar::Scalar> $crate::module::Module<T> for $ty<T> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &'a $crate::tensor::Tensor<T>),
            ) {
                $( self.$field.visit(&$crate::module::join(prefix, $name), f); )*
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::tensor::Tensor<T>),
            ) {
                $( self.$field.visit_mut(&$crate::module::join(prefix, $name), f); )*
            }

            fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut $crate::tensor::Tensor<T>)) {
                $( self.$field.for_each_param_mut(f); )*
            }
        }
    };
}
