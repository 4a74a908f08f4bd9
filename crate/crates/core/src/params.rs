//! Named parameter containers.
//!
//! Every weight struct is generic over its leaf type so the same layout holds
//! concrete matrices (`Mat<T>`), tape handles (`Var`) or optimizer moments.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Mat, Scalar};

macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P> {
            $(pub $field: P,)+
        }

        impl<P> $name<P> {
            pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> $name<Q> {
                $name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)+
                }
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)+
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)+
            }
        }
    };
}

pub(crate) use param_struct;

/// Truncated normal (±2σ) initializer used for every weight matrix.
pub fn trunc_normal<T: Scalar, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Mat::from_fn(rows, cols, |_, _| loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::lit(v);
        }
    })
}
