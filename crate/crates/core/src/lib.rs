//! Inference with a single treated cluster via the rearrangement test.

pub mod conley_taber;
pub mod estimators;
pub mod monte_carlo;
pub mod numerics;
pub mod size_bound;
pub mod test_engine;
pub mod weights;

pub use size_bound::{classify_tightness, size_bound, BoundComponents, Grade, TightnessGrade};
pub use test_engine::{
    run_test, Direction, EstimateVector, RearrangementTest, TestDecision, TestError,
};
pub use weights::{WeightCache, WeightSpec, WeightTable};
