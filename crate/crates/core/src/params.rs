//! Named parameter trees.
//!
//! Model weights are declared as structs generic over their leaf type: `Mat`
//! for storage, [`Var`](crate::autograd::Var) once bound into a graph, or
//! anything else a caller maps them to (gradients, optimizer moments). Every
//! leaf has a stable dotted name such as `blocks.0.self_attn.w_q`.

pub(crate) fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

/// Declares a parameter struct. Field kinds:
/// `leaf` (`P`), `leaves` (`Vec<P>`), `node` (nested tree), `nodes` (`Vec` of trees).
macro_rules! param_tree {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $(#[$fmeta:meta])* $kind:ident $field:ident : $ty:ty ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P = $crate::autograd::Mat> {
            $( $(#[$fmeta])* pub $field: $ty ),*
        }

        #[allow(dead_code)]
        impl<P> $name<P> {
            /// Maps every leaf, passing its dotted name.
            pub fn map<'s, Q>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s P) -> Q) -> $name<Q> {
                $name { $( $field: param_tree!(@map $kind, &self.$field, prefix, stringify!($field), f) ),* }
            }

            pub fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s P)) {
                $( param_tree!(@visit $kind, &self.$field, prefix, stringify!($field), f); )*
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
                $( param_tree!(@visit_mut $kind, &mut self.$field, prefix, stringify!($field), f); )*
            }
        }
    };

    (@map leaf, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        $f(&$crate::params::join($prefix, $field), $e)
    };
    (@map leaves, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        $e.iter().enumerate()
            .map(|(i, x)| $f(&format!("{}.{}", $crate::params::join($prefix, $field), i), x))
            .collect()
    };
    (@map node, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        $e.map(&$crate::params::join($prefix, $field), $f)
    };
    (@map nodes, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        $e.iter().enumerate()
            .map(|(i, x)| x.map(&format!("{}.{}", $crate::params::join($prefix, $field), i), $f))
            .collect()
    };

    (@visit leaf, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        $f(&$crate::params::join($prefix, $field), $e)
    };
    (@visit leaves, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        for (i, x) in $e.iter().enumerate() {
            $f(&format!("{}.{}", $crate::params::join($prefix, $field), i), x);
        }
    };
    (@visit node, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        $e.visit(&$crate::params::join($prefix, $field), $f)
    };
    (@visit nodes, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        for (i, x) in $e.iter().enumerate() {
            x.visit(&format!("{}.{}", $crate::params::join($prefix, $field), i), $f);
        }
    };

    (@visit_mut leaf, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        $f(&$crate::params::join($prefix, $field), $e)
    };
    (@visit_mut leaves, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        for (i, x) in $e.iter_mut().enumerate() {
            $f(&format!("{}.{}", $crate::params::join($prefix, $field), i), x);
        }
    };
    (@visit_mut node, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        $e.visit_mut(&$crate::params::join($prefix, $field), $f)
    };
    (@visit_mut nodes, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        for (i, x) in $e.iter_mut().enumerate() {
            x.visit_mut(&format!("{}.{}", $crate::params::join($prefix, $field), i), $f);
        }
    };
}

pub(crate) use param_tree;
