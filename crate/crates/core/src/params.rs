use crate::numerics::Tensor;

/// A tree of named parameter tensors.
///
/// Gradients use the same type as the parameters they belong to, so a
/// gradient is shape-compatible with its primal by construction.
pub trait Parameters: Clone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn zeroed(&self) -> Self {
        let mut g = self.clone();
        g.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
        g
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t)));
        out
    }

    /// Adds `other` elementwise; both trees must have identical structure.
    fn accumulate(&mut self, other: &Self) {
        let others: Vec<&Tensor> = other.named().into_iter().map(|(_, t)| t).collect();
        let mut i = 0;
        self.visit_mut("", &mut |_, t| {
            t.add_assign(others[i]).expect("matching parameter trees");
            i += 1;
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

/// Implements [`Parameters`] for a struct whose fields are tensors or other
/// parameter trees.
macro_rules! impl_parameters {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::params::Parameters for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a $crate::numerics::Tensor)) {
                $( $crate::params::Visit::visit_field(&self.$field, &$crate::params::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::numerics::Tensor)) {
                $( $crate::params::Visit::visit_field_mut(&mut self.$field, &$crate::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_parameters;

/// Field-level dispatch for [`impl_parameters`].
pub trait Visit {
    fn visit_field<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_field_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

impl Visit for Tensor {
    fn visit_field<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(name.to_string(), self);
    }
    fn visit_field_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(name.to_string(), self);
    }
}

impl<P: Parameters> Visit for P {
    fn visit_field<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.visit(name, f);
    }
    fn visit_field_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.visit_mut(name, f);
    }
}

impl<P: Parameters> Parameters for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
