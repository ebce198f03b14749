//! Reverse-mode automatic differentiation with second-order support.

mod graph;
mod params;
mod unroll;

pub use graph::{Graph, Var};
pub use params::{Bound, GradMap, Parameter, ParameterSet};
pub use unroll::{tentative_step, unrolled_gradient, unrolled_gradient_chunked, UnrollMode};
